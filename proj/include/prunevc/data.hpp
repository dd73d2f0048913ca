#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prunevc/tensor.hpp"

namespace prunevc {

// A short clip: frames are (C,H,W) tensors with values in [0,1].
struct FrameSequence {
  std::vector<Tensor> frames;
  std::int64_t width = 0;
  std::int64_t height = 0;
  std::int64_t channels = 0;
  std::string source;  // "synth" or "file"
};

// Seeded band-limited sinusoid texture translated along x by
// motion_px_per_frame with toroidal wrap; bit-deterministic per seed.
FrameSequence synth_sequence(std::uint64_t seed, std::int64_t length,
                             std::int64_t width, std::int64_t height,
                             std::int64_t channels,
                             double motion_px_per_frame);

// Raw clip container: magic "TVSF", then little-endian u32 fields
// (version=1, width, height, channels, frame_count), then frames as
// 8-bit samples interleaved (y, x, c). Loading scales to [0,1] by /255.
FrameSequence load_raw(const std::string& path);
void write_raw(const std::string& path, const FrameSequence& seq);

struct FrameBatch {
  Tensor current;    // (N,C,h,w)
  Tensor reference;  // previous frame of the same clip, same crop
};

// Seeded random (clip, frame>=1, crop offset) selection; the (seed, step)
// pair fully determines the batch.
FrameBatch make_batch(const std::vector<FrameSequence>& seqs,
                      std::int64_t batch, std::int64_t crop,
                      std::uint64_t seed, std::uint64_t step);

}  // namespace prunevc
