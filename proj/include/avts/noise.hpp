#pragma once

#include <cstdint>
#include <string>

#include "avts/features.hpp"

namespace avts {

enum class NoiseCategory { babble, music, speech };

NoiseCategory parse_noise_category(const std::string& name);
std::string to_string(NoiseCategory c);

// A noise-mixing request: category, SNR in dB, seed.
struct MixSpec {
  NoiseCategory category = NoiseCategory::babble;
  double snr_db = 0.0;
  uint64_t seed = 0;
};

// sqrt(mean(x^2)); errors on empty input.
double rms(const Waveform& wave);

// signal + g*noise with g = rms(signal) / (rms(noise_used) * 10^(snr_db/20)).
// Noise shorter than the signal is tiled; longer noise is cropped from a
// seeded offset. The gain is computed from the segment actually used, so the
// achieved SNR matches the request to floating-point precision.
Waveform mix_at_snr(const Waveform& signal, const Waveform& noise,
                    double snr_db, uint64_t seed = 0);

// Deterministic per (category, seed): babble sums 6 independent speech-like
// sources, music is a harmonic tone mixture with note envelopes, speech is a
// single speech-like source.
Waveform synth_noise(NoiseCategory category, double duration_s, uint64_t seed,
                     double sample_rate = 16000.0);

}  // namespace avts
