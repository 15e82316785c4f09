#include "nvrl/container.hpp"

#include <array>
#include <cstring>
#include <set>

#include "nvrl/detmath.hpp"

namespace nvrl {

uint32_t crc32_ieee(const uint8_t* data, size_t size) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t crc = 0xFFFFFFFFu;
  for (size_t i = 0; i < size; ++i) crc = table[(crc ^ data[i]) & 0xFF] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

namespace {

struct Writer {
  std::vector<uint8_t> bytes;
  void u8(uint8_t v) { bytes.push_back(v); }
  void u16(uint16_t v) {
    bytes.push_back((uint8_t)v);
    bytes.push_back((uint8_t)(v >> 8));
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back((uint8_t)(v >> (8 * i)));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back((uint8_t)(v >> (8 * i)));
  }
  void f16(float v) { u16(float_to_half(v)); }
  void raw(const uint8_t* p, size_t n) { bytes.insert(bytes.end(), p, p + n); }
};

struct Reader {
  const uint8_t* data;
  size_t size;
  size_t pos = 0;
  void need(size_t n) const {
    if (pos + n > size) throw StreamError("stream truncated");
  }
  uint8_t u8() {
    need(1);
    return data[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = (uint16_t)(data[pos] | (data[pos + 1] << 8));
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= (uint32_t)data[pos + i] << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= (uint64_t)data[pos + i] << (8 * i);
    pos += 8;
    return v;
  }
  float f16() { return half_to_float(u16()); }
};

void check_u16_range(int v, const char* what) {
  if (v < 0 || v > 0xFFFF) throw StreamError(std::string(what) + " out of range");
}

}  // namespace

size_t fixed_header_bytes(const SynthesisConfig& cfg) {
  // magic + version + mode + dims(6) + N + C + kernels(2) + stride + Cg[N]
  // + seed(8) + record count(2) + crc(4)
  return 4 + 1 + 1 + 6 + 1 + 2 + 2 + 1 + (size_t)cfg.num_stages + 8 + 2 + 4;
}

std::vector<uint8_t> write_stream(const StreamSections& s) {
  Writer w;
  w.raw((const uint8_t*)kMagic, 4);
  w.u8(s.version);
  w.u8((uint8_t)s.entropy_mode);
  check_u16_range(s.frames, "frames");
  check_u16_range(s.height, "height");
  check_u16_range(s.width, "width");
  w.u16((uint16_t)s.frames);
  w.u16((uint16_t)s.height);
  w.u16((uint16_t)s.width);
  const SynthesisConfig& c = s.config;
  w.u8((uint8_t)c.num_stages);
  w.u16((uint16_t)c.base_channels);
  w.u8((uint8_t)c.block_kernel);
  w.u8((uint8_t)c.stem_kernel);
  w.u8((uint8_t)c.grid_temporal_stride);
  for (int g : c.grid_channels) w.u8((uint8_t)g);
  w.u64(c.seed);
  check_u16_range((int)s.records.size(), "record count");
  w.u16((uint16_t)s.records.size());
  for (const TensorRecord& r : s.records) {
    w.u8(r.kind);
    w.u8(r.a);
    w.u8(r.b);
    w.u8((uint8_t)r.extents.size());
    for (int e : r.extents) {
      check_u16_range(e, "tensor extent");
      w.u16((uint16_t)e);
    }
    w.u8(r.qkind);
    if (r.qkind == 0) {
      w.f16(r.step);
      w.f16(r.sigma_w);
    } else {
      check_u16_range((int)r.steps.size(), "step count");
      w.u16((uint16_t)r.steps.size());
      for (float st : r.steps) w.f16(st);
    }
    w.u32((uint32_t)r.payload.size());
    w.raw(r.payload.data(), r.payload.size());
  }
  uint32_t crc = crc32_ieee(w.bytes.data(), w.bytes.size());
  w.u32(crc);
  return std::move(w.bytes);
}

StreamSections read_stream(const uint8_t* data, size_t size) {
  if (size < 4 + 1 + 1 + 6 + 4) throw StreamError("stream too short");
  if (std::memcmp(data, kMagic, 4) != 0) throw StreamError("bad magic");
  uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i) stored_crc |= (uint32_t)data[size - 4 + i] << (8 * i);
  if (crc32_ieee(data, size - 4) != stored_crc) throw StreamError("crc mismatch");

  Reader r{data, size - 4};
  r.pos = 4;
  StreamSections s;
  s.version = r.u8();
  if (s.version != kStreamVersion) throw StreamError("unsupported stream version");
  uint8_t mode = r.u8();
  if (mode > 1) throw StreamError("unknown entropy mode");
  s.entropy_mode = (EntropyMode)mode;
  s.frames = r.u16();
  s.height = r.u16();
  s.width = r.u16();
  SynthesisConfig& c = s.config;
  c.num_stages = r.u8();
  c.base_channels = r.u16();
  c.block_kernel = r.u8();
  c.stem_kernel = r.u8();
  c.grid_temporal_stride = r.u8();
  if (c.num_stages < 1 || c.num_stages > 8) throw StreamError("bad stage count");
  c.grid_channels.resize(c.num_stages);
  for (int& g : c.grid_channels) g = r.u8();
  c.seed = r.u64();
  c.frames = s.frames;
  c.out_height = s.height;
  c.out_width = s.width;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw StreamError(std::string("invalid stream config: ") + e.what());
  }
  int nrecords = r.u16();
  std::set<uint32_t> seen;
  for (int i = 0; i < nrecords; ++i) {
    TensorRecord rec;
    rec.kind = r.u8();
    rec.a = r.u8();
    rec.b = r.u8();
    int rank = r.u8();
    if (rank < 1 || rank > 5) throw StreamError("bad tensor rank");
    rec.extents.resize(rank);
    for (int d = 0; d < rank; ++d) {
      rec.extents[d] = r.u16();
      if (rec.extents[d] < 1) throw StreamError("bad tensor extent");
    }
    rec.qkind = r.u8();
    if (rec.qkind == 0) {
      rec.step = r.f16();
      rec.sigma_w = r.f16();
    } else if (rec.qkind == 1) {
      int nsteps = r.u16();
      rec.steps.resize(nsteps);
      for (float& st : rec.steps) st = r.f16();
    } else {
      throw StreamError("unknown quantization kind");
    }
    uint32_t plen = r.u32();
    r.need(plen);
    rec.payload.assign(r.data + r.pos, r.data + r.pos + plen);
    r.pos += plen;
    if (!seen.insert(rec.id_key()).second) throw StreamError("duplicate tensor id");
    s.records.push_back(std::move(rec));
  }
  if (r.pos != r.size) throw StreamError("trailing bytes after last record");
  return s;
}

BppBreakdown stream_bpp(const SynthesisConfig& cfg, size_t stream_size, int frames,
                        int height, int width) {
  double pixels = (double)frames * height * width;
  BppBreakdown b;
  b.total = 8.0 * (double)stream_size / pixels;
  b.header = 8.0 * (double)fixed_header_bytes(cfg) / pixels;
  b.payload = b.total - b.header;
  return b;
}

}  // namespace nvrl
