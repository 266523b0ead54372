#include "avts/noise.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "avts/rng.hpp"

namespace avts {

NoiseCategory parse_noise_category(const std::string& name) {
  if (name == "babble") return NoiseCategory::babble;
  if (name == "music") return NoiseCategory::music;
  if (name == "speech") return NoiseCategory::speech;
  throw std::invalid_argument("unknown noise category: " + name);
}

std::string to_string(NoiseCategory c) {
  switch (c) {
    case NoiseCategory::babble: return "babble";
    case NoiseCategory::music: return "music";
    case NoiseCategory::speech: return "speech";
  }
  return "?";
}

double rms(const Waveform& wave) {
  if (wave.samples.empty()) throw std::invalid_argument("rms: empty waveform");
  double s = 0.0;
  for (double v : wave.samples) s += v * v;
  return std::sqrt(s / wave.samples.size());
}

Waveform mix_at_snr(const Waveform& signal, const Waveform& noise,
                    double snr_db, uint64_t seed) {
  if (signal.samples.empty() || noise.samples.empty())
    throw std::invalid_argument("mix_at_snr: empty input");
  if (signal.sample_rate != noise.sample_rate)
    throw std::invalid_argument("mix_at_snr: sample rate mismatch");
  const size_t n = signal.samples.size();

  std::vector<double> seg(n);
  if (noise.samples.size() >= n) {
    const size_t slack = noise.samples.size() - n;
    size_t offset = 0;
    if (slack > 0) {
      Rng rng(seed);
      offset = static_cast<size_t>(rng.uniform_int(static_cast<int>(slack + 1)));
    }
    for (size_t i = 0; i < n; ++i) seg[i] = noise.samples[offset + i];
  } else {
    for (size_t i = 0; i < n; ++i) seg[i] = noise.samples[i % noise.samples.size()];
  }

  const double rs = rms(signal);
  Waveform segw{seg, signal.sample_rate};
  const double rn = rms(segw);
  if (rs <= 0.0) throw std::invalid_argument("mix_at_snr: silent signal");
  if (rn <= 0.0) throw std::invalid_argument("mix_at_snr: silent noise");
  const double g = rs / (rn * std::pow(10.0, snr_db / 20.0));

  Waveform out;
  out.sample_rate = signal.sample_rate;
  out.samples.resize(n);
  for (size_t i = 0; i < n; ++i) out.samples[i] = signal.samples[i] + g * seg[i];
  return out;
}

namespace {

// One talker: harmonic stack under drifting formant envelopes, gated at a
// syllabic rate, over a low noise floor.
std::vector<double> speech_like(Rng& rng, int n, double sr) {
  const int block = std::max(1, static_cast<int>(sr / 100.0));  // 10 ms
  double f0 = rng.uniform(90.0, 230.0);
  double formants[3] = {rng.uniform(300.0, 900.0), rng.uniform(1000.0, 2400.0),
                        rng.uniform(2500.0, 3400.0)};
  const double bw = 140.0;
  bool voiced = true;
  int hold = 0;
  double gate = 0.0;

  constexpr int kMaxHarm = 16;
  double phase[kMaxHarm] = {0.0};
  double amp[kMaxHarm] = {0.0};

  std::vector<double> out(n);
  for (int start = 0; start < n; start += block) {
    // per-block parameter drift
    f0 = std::clamp(f0 + rng.normal(0.0, 3.0), 80.0, 280.0);
    for (int k = 0; k < 3; ++k)
      formants[k] = std::clamp(formants[k] + rng.normal(0.0, 40.0),
                               250.0 + 900.0 * k, 1100.0 + 1300.0 * k);
    if (--hold <= 0) {
      voiced = !voiced;
      hold = voiced ? 8 + rng.uniform_int(16) : 3 + rng.uniform_int(8);
    }
    const int nh = std::min(kMaxHarm, static_cast<int>(3800.0 / f0));
    for (int h = 0; h < nh; ++h) {
      const double f = f0 * (h + 1);
      double env = 0.05;
      for (double fc : formants) {
        const double z = (f - fc) / bw;
        env += std::exp(-0.5 * z * z);
      }
      amp[h] = env / (1.0 + 0.3 * h);
    }
    const double gate_target = voiced ? 1.0 : 0.0;
    const int stop = std::min(n, start + block);
    for (int i = start; i < stop; ++i) {
      gate += 0.004 * (gate_target - gate);
      double s = 0.0;
      for (int h = 0; h < nh; ++h) {
        phase[h] += 2.0 * M_PI * f0 * (h + 1) / sr;
        if (phase[h] > 2.0 * M_PI) phase[h] -= 2.0 * M_PI;
        s += amp[h] * std::sin(phase[h]);
      }
      out[i] = gate * s + 0.01 * rng.normal();
    }
  }
  return out;
}

std::vector<double> music_like(Rng& rng, int n, double sr) {
  // minor-pentatonic degrees over a seeded root
  const double root = 180.0 * std::pow(2.0, rng.uniform(0.0, 1.0));
  const int degrees[] = {0, 3, 5, 7, 10, 12, 15};
  std::vector<double> out(n, 0.0);
  int t = 0;
  while (t < n) {
    const int len = static_cast<int>(sr * rng.uniform(0.2, 0.5));
    const int voices = 1 + (rng.uniform01() < 0.35 ? 1 : 0);
    for (int v = 0; v < voices; ++v) {
      const double f = root * std::pow(2.0, degrees[rng.uniform_int(7)] / 12.0);
      const double decay = rng.uniform(2.0, 6.0);
      double phase = rng.uniform(0.0, 2.0 * M_PI);
      const int stop = std::min(n, t + static_cast<int>(len * 1.5));
      for (int i = t; i < stop; ++i) {
        const double dt = (i - t) / sr;
        const double env = std::exp(-decay * dt);
        double s = 0.0;
        for (int h = 1; h <= 5; ++h) {
          if (f * h > sr / 2.0 * 0.9) break;
          s += std::sin(phase * h + 2.0 * M_PI * f * h * dt +
                        0.05 * std::sin(2.0 * M_PI * 5.0 * dt)) /
               std::pow(h, 1.5);
        }
        out[i] += env * s;
      }
    }
    t += len;
  }
  return out;
}

void normalize_rms(std::vector<double>& x, double target) {
  double s = 0.0;
  for (double v : x) s += v * v;
  const double r = std::sqrt(s / x.size());
  if (r > 0.0)
    for (double& v : x) v *= target / r;
}

}  // namespace

Waveform synth_noise(NoiseCategory category, double duration_s, uint64_t seed,
                     double sample_rate) {
  if (duration_s <= 0.0)
    throw std::invalid_argument("synth_noise: duration must be > 0");
  const int n = static_cast<int>(std::lround(duration_s * sample_rate));
  Rng rng(seed);
  std::vector<double> x;
  switch (category) {
    case NoiseCategory::speech:
      x = speech_like(rng, n, sample_rate);
      break;
    case NoiseCategory::babble: {
      x.assign(n, 0.0);
      for (int talker = 0; talker < 6; ++talker) {
        Rng sub = rng.fork(talker + 1);
        std::vector<double> t = speech_like(sub, n, sample_rate);
        for (int i = 0; i < n; ++i) x[i] += t[i];
      }
      break;
    }
    case NoiseCategory::music:
      x = music_like(rng, n, sample_rate);
      break;
  }
  normalize_rms(x, 0.1);
  return Waveform{std::move(x), sample_rate};
}

}  // namespace avts
