#include "avts/features.hpp"

#include <bit>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace avts {

namespace {

constexpr double kLogFloor = 1e-10;

// Iterative radix-2 FFT, in place. n must be a power of two.
void fft(std::vector<std::complex<double>>& a) {
  const size_t n = a.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * M_PI / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t j = 0; j < len / 2; ++j) {
        const std::complex<double> u = a[i + j];
        const std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

size_t next_pow2(size_t n) {
  size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

FeatureStream logmel(const Waveform& wave, int n_mels, double hop_ms,
                     double win_ms) {
  if (wave.sample_rate <= 0.0)
    throw std::invalid_argument("logmel: sample_rate must be > 0");
  if (n_mels < 1) throw std::invalid_argument("logmel: n_mels must be >= 1");
  const int win = static_cast<int>(std::lround(wave.sample_rate * win_ms / 1000.0));
  const int hop = static_cast<int>(std::lround(wave.sample_rate * hop_ms / 1000.0));
  const int n = static_cast<int>(wave.samples.size());
  if (n < win)
    throw std::invalid_argument("logmel: waveform shorter than one window");
  const int t = 1 + (n - win) / hop;

  const size_t nfft = next_pow2(static_cast<size_t>(win));
  const size_t nbins = nfft / 2 + 1;

  // periodic Hann
  std::vector<double> window(win);
  for (int i = 0; i < win; ++i)
    window[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / win);

  // triangular filters, equally spaced on the mel scale over [0, sr/2]
  const double mel_max = hz_to_mel(wave.sample_rate / 2.0);
  std::vector<double> centers_hz(n_mels + 2);
  for (int m = 0; m < n_mels + 2; ++m)
    centers_hz[m] = mel_to_hz(mel_max * m / (n_mels + 1));
  std::vector<double> bin_hz(nbins);
  for (size_t b = 0; b < nbins; ++b)
    bin_hz[b] = wave.sample_rate * static_cast<double>(b) / static_cast<double>(nfft);

  Tensor out = Tensor::zeros({t, n_mels});
  std::vector<std::complex<double>> buf(nfft);
  std::vector<double> power(nbins);
  for (int fi = 0; fi < t; ++fi) {
    const int start = fi * hop;
    for (size_t i = 0; i < nfft; ++i) {
      const double s = i < static_cast<size_t>(win)
                           ? wave.samples[start + i] * window[i]
                           : 0.0;
      buf[i] = {s, 0.0};
    }
    fft(buf);
    for (size_t b = 0; b < nbins; ++b) power[b] = std::norm(buf[b]);
    for (int m = 0; m < n_mels; ++m) {
      const double lo = centers_hz[m], c = centers_hz[m + 1], hi = centers_hz[m + 2];
      double e = 0.0;
      for (size_t b = 0; b < nbins; ++b) {
        const double f = bin_hz[b];
        if (f <= lo || f >= hi) continue;
        const double w = f <= c ? (f - lo) / (c - lo) : (hi - f) / (hi - c);
        e += w * power[b];
      }
      out.at(fi, m) = std::log(std::max(e, kLogFloor));
    }
  }
  check_finite(out, "logmel");
  FeatureStream fs;
  fs.frames = out;
  fs.frame_rate_hz = 1000.0 / hop_ms;
  fs.modality = Modality::audio;
  return fs;
}

FeatureStream stack_frames(const FeatureStream& fs, int k) {
  if (fs.modality != Modality::audio)
    throw std::invalid_argument("stack_frames: audio streams only");
  if (k < 1) throw std::invalid_argument("stack_frames: k must be >= 1");
  const int t = fs.frames.rows(), d = fs.frames.cols();
  if (t < k) throw std::invalid_argument("stack_frames: fewer frames than k");
  const int tout = t / k;
  Tensor out = Tensor::zeros({tout, k * d});
  for (int i = 0; i < tout; ++i)
    for (int j = 0; j < k; ++j)
      for (int c = 0; c < d; ++c) out.at(i, j * d + c) = fs.frames.at(i * k + j, c);
  FeatureStream res;
  res.frames = out;
  res.frame_rate_hz = fs.frame_rate_hz / k;
  res.modality = Modality::audio;
  return res;
}

// ---- AVTF I/O ----

namespace {

void put_u32(std::ostream& os, uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff),
                         static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff),
                         static_cast<char>((v >> 24) & 0xff)};
  os.write(bytes, 4);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("avtf: truncated file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float f) {
  put_u32(os, std::bit_cast<uint32_t>(f));
}

float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }

}  // namespace

void write_avtf(const std::string& path, const Tensor& mat,
                uint32_t frame_rate_milli_hz) {
  if (mat.ndim() != 2)
    throw std::invalid_argument("write_avtf: expected 2-D tensor");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_avtf: cannot open " + path);
  os.write("AVTF", 4);
  put_u32(os, static_cast<uint32_t>(mat.shape[0]));
  put_u32(os, static_cast<uint32_t>(mat.shape[1]));
  put_u32(os, frame_rate_milli_hz);
  for (double v : *mat.data) put_f32(os, static_cast<float>(v));
  if (!os) throw std::runtime_error("write_avtf: write failed for " + path);
}

AvtfFile read_avtf(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_avtf: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "AVTF", 4) != 0)
    throw std::runtime_error("read_avtf: bad magic in " + path);
  const uint32_t rows = get_u32(is);
  const uint32_t cols = get_u32(is);
  const uint32_t rate = get_u32(is);
  AvtfFile f;
  f.frame_rate_milli_hz = rate;
  f.mat = Tensor::zeros({static_cast<int>(rows), static_cast<int>(cols)});
  for (double& v : *f.mat.data) v = static_cast<double>(get_f32(is));
  return f;
}

void write_wave_avtf(const std::string& path, const Waveform& wave) {
  Tensor col = Tensor::zeros({static_cast<int>(wave.samples.size()), 1});
  std::copy(wave.samples.begin(), wave.samples.end(), col.data->begin());
  write_avtf(path, col, static_cast<uint32_t>(std::lround(wave.sample_rate * 1000.0)));
}

Waveform read_wave_avtf(const std::string& path) {
  AvtfFile f = read_avtf(path);
  if (f.mat.cols() != 1)
    throw std::runtime_error("read_wave_avtf: expected single-column file " + path);
  Waveform w;
  w.sample_rate = static_cast<double>(f.frame_rate_milli_hz) / 1000.0;
  w.samples.assign(f.mat.data->begin(), f.mat.data->end());
  return w;
}

}  // namespace avts
