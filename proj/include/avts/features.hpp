#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "avts/tensor.hpp"

namespace avts {

struct Waveform {
  std::vector<double> samples;
  double sample_rate = 16000.0;
};

enum class Modality { audio, video };

// Synchronized per-frame features for one modality. `frames` is a T x D leaf
// tensor (no grad); both stacked audio and video streams sit at 25 Hz.
struct FeatureStream {
  Tensor frames;
  double frame_rate_hz = 0.0;
  Modality modality = Modality::audio;
};

// 80-band log mel-filterbank at a 10 ms hop: 25 ms periodic-Hann window,
// triangular filters 0..sr/2, no pre-emphasis, log floor ln(1e-10).
// Frame count is 1 + floor((N - win)/hop); errors when the waveform is
// shorter than one window.
FeatureStream logmel(const Waveform& wave, int n_mels = 80, double hop_ms = 10.0,
                     double win_ms = 25.0);

// Concatenates k neighboring frames: T' = floor(T/k), D' = k*D, frame rate
// divided by k. Trailing remainder frames are dropped.
FeatureStream stack_frames(const FeatureStream& fs, int k = 4);

// Mel scale helpers (exposed for the filterbank response oracle in tests).
double hz_to_mel(double hz);
double mel_to_hz(double mel);

// ---- AVTF feature file format ----
// magic "AVTF", little-endian u32 rows, u32 cols, u32 frame_rate_milliHz,
// then rows*cols little-endian f32, row-major.
void write_avtf(const std::string& path, const Tensor& mat,
                uint32_t frame_rate_milli_hz);

struct AvtfFile {
  Tensor mat;
  uint32_t frame_rate_milli_hz = 0;
};
AvtfFile read_avtf(const std::string& path);

// Waveforms ride in AVTF as an N x 1 matrix with the sample rate in the
// frame-rate field.
void write_wave_avtf(const std::string& path, const Waveform& wave);
Waveform read_wave_avtf(const std::string& path);

}  // namespace avts
