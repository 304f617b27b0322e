#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "rasr/tensor.hpp"

namespace rasr {

struct WaveForm {
  std::vector<double> samples;
  int sample_rate = 16000;

  double duration_s() const { return static_cast<double>(samples.size()) / static_cast<double>(sample_rate); }
  std::size_t size() const { return samples.size(); }

  void validate() const {
    if (sample_rate <= 0) throw ConfigError("sample rate must be positive");
    for (double s : samples)
      if (!std::isfinite(s)) throw FormatError("waveform contains non-finite samples");
  }
};

namespace dsp {

inline constexpr int kSampleRate = 16000;
inline constexpr std::size_t kFrameLength = 400; // 25 ms
inline constexpr std::size_t kFrameShift = 160;  // 10 ms
inline constexpr std::size_t kFftSize = 512;
inline constexpr std::size_t kNumBins = kFftSize / 2 + 1;
inline constexpr std::size_t kNumMels = 80;
inline constexpr double kMelLowHz = 80.0;
inline constexpr double kMelHighHz = 8000.0;
inline constexpr double kLogFloor = 1e-8;
inline constexpr double kPreEmphasis = 0.97;

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// x'[0] = x[0], x'[t] = x[t] - coeff * x[t-1].
inline WaveForm pre_emphasize(const WaveForm& wave, double coeff = kPreEmphasis) {
  if (wave.samples.empty()) throw EmptyAudio("pre-emphasis of an empty waveform");
  WaveForm out{std::vector<double>(wave.samples.size()), wave.sample_rate};
  out.samples[0] = wave.samples[0];
  for (std::size_t t = 1; t < wave.samples.size(); ++t) out.samples[t] = wave.samples[t] - coeff * wave.samples[t - 1];
  return out;
}

inline std::size_t frame_count(std::size_t num_samples) {
  if (num_samples < kFrameLength) return 0;
  return (num_samples - kFrameLength) / kFrameShift + 1;
}

inline const std::array<double, kFrameLength>& hamming_window() {
  static const auto w = [] {
    std::array<double, kFrameLength> a{};
    for (std::size_t n = 0; n < kFrameLength; ++n)
      a[n] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) /
                                    static_cast<double>(kFrameLength - 1));
    return a;
  }();
  return w;
}

// (n_frames x 400) matrix of Hamming-windowed frames.
inline Tensor frame_and_window(const WaveForm& wave) {
  const std::size_t n = frame_count(wave.samples.size());
  if (n == 0)
    throw AudioTooShort("need at least " + std::to_string(kFrameLength) + " samples, got " +
                        std::to_string(wave.samples.size()));
  const auto& w = hamming_window();
  Tensor frames = Tensor::matrix(n, kFrameLength);
  for (std::size_t f = 0; f < n; ++f)
    for (std::size_t i = 0; i < kFrameLength; ++i) frames(f, i) = wave.samples[f * kFrameShift + i] * w[i];
  return frames;
}

// In-place iterative radix-2 FFT; size must be a power of two.
inline void fft(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (!std::has_single_bit(n)) throw ShapeError("fft size must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    for (std::size_t i = 0; i < n; i += len)
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> wk = std::polar(1.0, ang * static_cast<double>(k));
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * wk;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
      }
  }
}

// |DFT|^2 of a zero-padded frame, bins 0..256.
inline std::vector<double> power_spectrum(std::span<const double> frame) {
  std::vector<std::complex<double>> buf(kFftSize);
  for (std::size_t i = 0; i < frame.size() && i < kFftSize; ++i) buf[i] = frame[i];
  fft(buf);
  std::vector<double> p(kNumBins);
  for (std::size_t k = 0; k < kNumBins; ++k) p[k] = std::norm(buf[k]);
  return p;
}

// Edge frequencies of the 80 triangular filters: filter k spans
// [edges[k], edges[k+2]] and peaks at edges[k+1].
inline const std::vector<double>& mel_edges_hz() {
  static const auto edges = [] {
    std::vector<double> e(kNumMels + 2);
    const double lo = hz_to_mel(kMelLowHz), hi = hz_to_mel(kMelHighHz);
    for (std::size_t i = 0; i < e.size(); ++i)
      e[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(kNumMels + 1));
    return e;
  }();
  return edges;
}

inline double mel_center_hz(std::size_t filter) { return mel_edges_hz().at(filter + 1); }

// (80 x 257) triangular weights on the DFT bin frequencies.
inline const Tensor& mel_filterbank() {
  static const Tensor fb = [] {
    const auto& e = mel_edges_hz();
    Tensor m = Tensor::matrix(kNumMels, kNumBins);
    for (std::size_t k = 0; k < kNumMels; ++k)
      for (std::size_t b = 0; b < kNumBins; ++b) {
        const double f = static_cast<double>(b) * kSampleRate / static_cast<double>(kFftSize);
        double w = 0.0;
        if (f >= e[k] && f <= e[k + 1]) w = (f - e[k]) / (e[k + 1] - e[k]);
        else if (f > e[k + 1] && f <= e[k + 2]) w = (e[k + 2] - f) / (e[k + 2] - e[k + 1]);
        m(k, b) = w;
      }
    return m;
  }();
  return fb;
}

// Filterbank energies before the log, (n_frames x 80).
inline Tensor mel_energies(const Tensor& frames) {
  const Tensor& fb = mel_filterbank();
  Tensor out = Tensor::matrix(frames.rows(), kNumMels);
  for (std::size_t f = 0; f < frames.rows(); ++f) {
    const auto p = power_spectrum(frames.row(f));
    for (std::size_t k = 0; k < kNumMels; ++k) {
      double s = 0.0;
      for (std::size_t b = 0; b < kNumBins; ++b) s += fb(k, b) * p[b];
      out(f, k) = s;
    }
  }
  return out;
}

inline Tensor log_mel(const Tensor& frames) {
  if (frames.cols() != kFrameLength) throw ShapeError("log_mel expects 400-sample frames");
  Tensor e = mel_energies(frames);
  for (double& v : e.storage()) v = std::log(std::max(v, kLogFloor));
  return e;
}

// pre-emphasis -> framing/windowing -> log-mel, (T' x 80).
inline Tensor featurize(const WaveForm& wave) {
  if (wave.sample_rate != kSampleRate)
    throw ConfigError("expected " + std::to_string(kSampleRate) + " Hz audio, got " + std::to_string(wave.sample_rate));
  wave.validate();
  return log_mel(frame_and_window(pre_emphasize(wave)));
}

// ---------------------------------------------------------------- file formats

namespace detail {
inline std::uint32_t rd_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}
inline std::uint16_t rd_u16(const unsigned char* p) { return std::uint16_t(p[0] | p[1] << 8); }
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>(v >> 8));
}
inline std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}
} // namespace detail

// Mono RIFF/WAVE, PCM16 or float32, 16 kHz only.
inline WaveForm read_wav(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  const auto fail = [&](const std::string& why) { return FormatError(path.string() + ": " + why); };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw fail("not a RIFF/WAVE file");
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t len = detail::rd_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size()) throw fail("truncated chunk");
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (len < 16) throw fail("short fmt chunk");
      format = detail::rd_u16(bytes.data() + body);
      channels = detail::rd_u16(bytes.data() + body + 2);
      rate = detail::rd_u32(bytes.data() + body + 4);
      bits = detail::rd_u16(bytes.data() + body + 14);
      if (format == 0xFFFE && len >= 26) format = detail::rd_u16(bytes.data() + body + 24);
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      if (!have_fmt) throw fail("data chunk before fmt chunk");
      if (channels != 1) throw fail("expected mono audio, got " + std::to_string(channels) + " channels");
      if (rate != static_cast<std::uint32_t>(kSampleRate))
        throw fail("expected 16000 Hz, got " + std::to_string(rate) + " (resampling is not supported)");
      WaveForm w;
      w.sample_rate = kSampleRate;
      const unsigned char* p = bytes.data() + body;
      if (format == 1 && bits == 16) {
        w.samples.resize(len / 2);
        for (std::size_t i = 0; i < w.samples.size(); ++i)
          w.samples[i] = static_cast<std::int16_t>(detail::rd_u16(p + 2 * i)) / 32768.0;
      } else if (format == 3 && bits == 32) {
        w.samples.resize(len / 4);
        for (std::size_t i = 0; i < w.samples.size(); ++i)
          w.samples[i] = std::bit_cast<float>(detail::rd_u32(p + 4 * i));
      } else {
        throw fail("unsupported sample format " + std::to_string(format) + "/" + std::to_string(bits) + " bit");
      }
      w.validate();
      return w;
    }
    pos = body + len + (len & 1u);
  }
  throw fail("no data chunk");
}

enum class WavEncoding { Float32, Pcm16 };

inline void write_wav(const std::filesystem::path& path, const WaveForm& wave, WavEncoding enc = WavEncoding::Float32) {
  const bool is_float = enc == WavEncoding::Float32;
  const std::uint16_t bits = is_float ? 32 : 16;
  const std::uint32_t data_len = static_cast<std::uint32_t>(wave.samples.size() * (bits / 8));
  std::string s;
  s.reserve(44 + data_len);
  s += "RIFF";
  detail::put_u32(s, 36 + data_len);
  s += "WAVEfmt ";
  detail::put_u32(s, 16);
  detail::put_u16(s, is_float ? 3 : 1);
  detail::put_u16(s, 1);
  detail::put_u32(s, static_cast<std::uint32_t>(wave.sample_rate));
  detail::put_u32(s, static_cast<std::uint32_t>(wave.sample_rate) * (bits / 8));
  detail::put_u16(s, bits / 8);
  detail::put_u16(s, bits);
  s += "data";
  detail::put_u32(s, data_len);
  for (double v : wave.samples) {
    if (is_float) {
      detail::put_u32(s, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
      const double c = std::clamp(v, -1.0, 32767.0 / 32768.0);
      detail::put_u16(s, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(c * 32768.0))));
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

// Binary feature matrix: "LMEL", u32 rows, u32 cols, row-major LE float64.
inline void write_lmel(const std::filesystem::path& path, const Tensor& m) {
  static_assert(std::endian::native == std::endian::little);
  std::string s = "LMEL";
  detail::put_u32(s, static_cast<std::uint32_t>(m.rows()));
  detail::put_u32(s, static_cast<std::uint32_t>(m.cols()));
  s.append(reinterpret_cast<const char*>(m.data().data()), m.size() * sizeof(double));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline Tensor read_lmel(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "LMEL", 4) != 0) throw FormatError(path.string() + ": bad LMEL magic");
  const std::uint32_t rows = detail::rd_u32(bytes.data() + 4), cols = detail::rd_u32(bytes.data() + 8);
  const std::size_t n = std::size_t(rows) * cols;
  if (bytes.size() != 12 + n * sizeof(double)) throw FormatError(path.string() + ": LMEL size mismatch");
  Tensor m = Tensor::matrix(rows, cols);
  std::memcpy(m.data().data(), bytes.data() + 12, n * sizeof(double));
  return m;
}

} // namespace dsp
} // namespace rasr
