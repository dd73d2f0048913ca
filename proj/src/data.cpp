#include "prunevc/data.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "prunevc/errors.hpp"
#include "prunevc/rng.hpp"

namespace prunevc {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

std::int64_t wrap(std::int64_t i, std::int64_t n) {
  return ((i % n) + n) % n;
}

}  // namespace

FrameSequence synth_sequence(std::uint64_t seed, std::int64_t length,
                             std::int64_t width, std::int64_t height,
                             std::int64_t channels,
                             double motion_px_per_frame) {
  if (length < 1 || width < 1 || height < 1 || channels < 1)
    throw ConfigError("synth_sequence: degenerate dimensions");

  // per-channel base texture: integer spatial frequencies keep the pattern
  // smooth under toroidal translation
  constexpr int kComponents = 8;
  std::vector<std::vector<float>> base(static_cast<std::size_t>(channels));
  for (std::int64_t c = 0; c < channels; ++c) {
    RngStream rng(seed, rngstream::synth, static_cast<std::uint64_t>(c));
    double fx[kComponents], fy[kComponents], amp[kComponents],
        phase[kComponents];
    double total_amp = 0.0;
    for (int j = 0; j < kComponents; ++j) {
      fx[j] = static_cast<double>(rng.below(5));
      fy[j] = static_cast<double>(rng.below(5));
      if (fx[j] == 0.0 && fy[j] == 0.0) fx[j] = 1.0;
      amp[j] = 0.3 + 0.7 * rng.uniform_d();
      phase[j] = kTwoPi * rng.uniform_d();
      total_amp += amp[j];
    }
    auto& b = base[static_cast<std::size_t>(c)];
    b.resize(static_cast<std::size_t>(width * height));
    for (std::int64_t y = 0; y < height; ++y)
      for (std::int64_t x = 0; x < width; ++x) {
        double v = 0.0;
        for (int j = 0; j < kComponents; ++j)
          v += amp[j] * std::sin(kTwoPi * (fx[j] * static_cast<double>(x) /
                                               static_cast<double>(width) +
                                           fy[j] * static_cast<double>(y) /
                                               static_cast<double>(height)) +
                                 phase[j]);
        double p = 0.5 + 0.5 * v / total_amp;
        if (p < 0.0) p = 0.0;
        if (p > 1.0) p = 1.0;
        b[static_cast<std::size_t>(y * width + x)] = static_cast<float>(p);
      }
  }

  FrameSequence seq;
  seq.width = width;
  seq.height = height;
  seq.channels = channels;
  seq.source = "synth";
  seq.frames.reserve(static_cast<std::size_t>(length));
  for (std::int64_t t = 0; t < length; ++t) {
    Tensor f(Shape{channels, height, width});
    const double s = motion_px_per_frame * static_cast<double>(t);
    for (std::int64_t c = 0; c < channels; ++c) {
      const auto& b = base[static_cast<std::size_t>(c)];
      for (std::int64_t y = 0; y < height; ++y)
        for (std::int64_t x = 0; x < width; ++x) {
          const double p = static_cast<double>(x) - s;
          const double fl = std::floor(p);
          const double frac = p - fl;
          const std::int64_t i0 = wrap(static_cast<std::int64_t>(fl), width);
          const std::int64_t i1 = wrap(static_cast<std::int64_t>(fl) + 1, width);
          const double v =
              (1.0 - frac) *
                  static_cast<double>(b[static_cast<std::size_t>(y * width + i0)]) +
              frac *
                  static_cast<double>(b[static_cast<std::size_t>(y * width + i1)]);
          f.data[(c * height + y) * width + x] = static_cast<float>(v);
        }
    }
    seq.frames.push_back(std::move(f));
  }
  return seq;
}

namespace {

std::uint32_t read_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in)
    throw IoError(std::string("raw clip: truncated while reading ") + what);
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

FrameSequence load_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("raw clip: cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "TVSF", 4) != 0)
    throw IoError("raw clip: '" + path + "' lacks the TVSF magic");
  const std::uint32_t version = read_u32(in, "version");
  if (version != 1)
    throw IoError("raw clip: unsupported version " + std::to_string(version));
  const std::uint32_t width = read_u32(in, "width");
  const std::uint32_t height = read_u32(in, "height");
  const std::uint32_t channels = read_u32(in, "channels");
  const std::uint32_t count = read_u32(in, "frame count");
  if (width == 0 || height == 0 || channels == 0 || count == 0)
    throw IoError("raw clip: zero dimension in header of '" + path + "'");

  FrameSequence seq;
  seq.width = width;
  seq.height = height;
  seq.channels = channels;
  seq.source = "file";
  const std::int64_t frame_bytes =
      static_cast<std::int64_t>(width) * height * channels;
  std::vector<unsigned char> buf(static_cast<std::size_t>(frame_bytes));
  for (std::uint32_t t = 0; t < count; ++t) {
    in.read(reinterpret_cast<char*>(buf.data()), frame_bytes);
    if (!in)
      throw IoError("raw clip: truncated payload in '" + path + "' at frame " +
                    std::to_string(t));
    Tensor f(Shape{channels, height, width});
    std::size_t idx = 0;
    for (std::int64_t y = 0; y < height; ++y)
      for (std::int64_t x = 0; x < width; ++x)
        for (std::int64_t c = 0; c < channels; ++c)
          f.data[(c * height + y) * width + x] =
              static_cast<float>(buf[idx++]) / 255.0f;
    seq.frames.push_back(std::move(f));
  }
  return seq;
}

void write_raw(const std::string& path, const FrameSequence& seq) {
  if (seq.frames.empty() || seq.width < 1 || seq.height < 1 ||
      seq.channels < 1)
    throw IoError("raw clip: refusing to write an empty sequence");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("raw clip: cannot create '" + path + "'");
  out.write("TVSF", 4);
  write_u32(out, 1);
  write_u32(out, static_cast<std::uint32_t>(seq.width));
  write_u32(out, static_cast<std::uint32_t>(seq.height));
  write_u32(out, static_cast<std::uint32_t>(seq.channels));
  write_u32(out, static_cast<std::uint32_t>(seq.frames.size()));
  std::vector<unsigned char> buf(
      static_cast<std::size_t>(seq.width * seq.height * seq.channels));
  for (const auto& f : seq.frames) {
    if (f.shape != Shape{seq.channels, seq.height, seq.width})
      throw IoError("raw clip: frame shape mismatch");
    std::size_t idx = 0;
    for (std::int64_t y = 0; y < seq.height; ++y)
      for (std::int64_t x = 0; x < seq.width; ++x)
        for (std::int64_t c = 0; c < seq.channels; ++c) {
          float v = f.data[(c * seq.height + y) * seq.width + x] * 255.0f;
          if (v < 0.0f) v = 0.0f;
          if (v > 255.0f) v = 255.0f;
          buf[idx++] = static_cast<unsigned char>(std::lround(v));
        }
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
  }
  if (!out) throw IoError("raw clip: write failed for '" + path + "'");
}

FrameBatch make_batch(const std::vector<FrameSequence>& seqs,
                      std::int64_t batch, std::int64_t crop,
                      std::uint64_t seed, std::uint64_t step) {
  if (seqs.empty()) throw ConfigError("batcher: no sequences");
  const std::int64_t channels = seqs.front().channels;
  for (const auto& s : seqs) {
    if (s.channels != channels)
      throw ConfigError("batcher: sequences disagree on channel count");
    if (s.frames.size() < 2)
      throw ConfigError("batcher: sequences need at least 2 frames");
    if (s.width < crop || s.height < crop)
      throw ConfigError("batcher: crop " + std::to_string(crop) +
                        " exceeds sequence size " + std::to_string(s.width) +
                        "x" + std::to_string(s.height));
  }

  RngStream rng(seed, rngstream::batcher, step);
  FrameBatch out;
  out.current = Tensor(Shape{batch, channels, crop, crop});
  out.reference = Tensor(Shape{batch, channels, crop, crop});
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto& s = seqs[static_cast<std::size_t>(rng.below(seqs.size()))];
    const std::int64_t t =
        1 + static_cast<std::int64_t>(rng.below(s.frames.size() - 1));
    const std::int64_t x0 =
        static_cast<std::int64_t>(rng.below(s.width - crop + 1));
    const std::int64_t y0 =
        static_cast<std::int64_t>(rng.below(s.height - crop + 1));
    const Tensor& cur = s.frames[static_cast<std::size_t>(t)];
    const Tensor& ref = s.frames[static_cast<std::size_t>(t - 1)];
    for (std::int64_t c = 0; c < channels; ++c)
      for (std::int64_t y = 0; y < crop; ++y)
        for (std::int64_t x = 0; x < crop; ++x) {
          out.current.at4(b, c, y, x) =
              cur.data[(c * s.height + (y0 + y)) * s.width + (x0 + x)];
          out.reference.at4(b, c, y, x) =
              ref.data[(c * s.height + (y0 + y)) * s.width + (x0 + x)];
        }
  }
  return out;
}

}  // namespace prunevc
