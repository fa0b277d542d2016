// Signal-path primitives: fixed-duration windowing of labeled streams,
// log-amplitude spectrograms in dB, and FIR anti-aliased integer decimation.
// All functions are pure; none touch the autodiff graph (spectrogram inputs
// never need gradients).
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>
#include <vector>

#include "fedfreq/error.hpp"
#include "fedfreq/tensor.hpp"

namespace fedfreq {

struct RawStream {
    std::vector<std::vector<double>> channels;  // one row per sensor axis
    int fs = 0;                                 // Hz
    std::vector<int> labels;                    // per-sample activity id

    size_t length() const { return labels.size(); }

    void validate() const {
        for (const auto& ch : channels)
            if (ch.size() != labels.size())
                throw DimensionError("RawStream: channel length differs from label length");
        if (fs <= 0) throw ConfigurationError("RawStream: sampling frequency must be positive");
    }
};

struct SensorWindow {
    Tensor data;               // [n_rows, window_len], rows grouped by sensor
    int fs = 0;                // Hz
    int label = 0;             // majority activity id
    std::vector<int> context;  // 1 per present sensor, 0 otherwise
};

struct SpectrogramConfig {
    int win_len = 16;
    int hop = 8;
    int nfft = 16;
    double db_floor = -80.0;

    void validate() const {
        if (win_len < 1 || hop < 1 || nfft < 1)
            throw ConfigurationError("SpectrogramConfig: win_len, hop, nfft must be positive");
        if (win_len > nfft)
            throw ConfigurationError("SpectrogramConfig: win_len must not exceed nfft");
        if ((nfft & (nfft - 1)) != 0)
            throw ConfigurationError("SpectrogramConfig: nfft must be a power of two");
    }
};

// In-place iterative radix-2 FFT; size must be a power of two.
inline void fft_radix2(std::vector<std::complex<double>>& a) {
    const size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) throw DimensionError("fft_radix2: size must be 2^k");
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * M_PI / double(len);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t j = 0; j < len / 2; ++j) {
                const std::complex<double> u = a[i + j];
                const std::complex<double> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

// Periodic Hann window, the STFT analysis window used throughout.
inline std::vector<double> hann_window(int n) {
    std::vector<double> w(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        w[size_t(i)] = 0.5 * (1.0 - std::cos(2.0 * M_PI * double(i) / double(n)));
    return w;
}

// One-sided STFT magnitudes: [nfft/2 + 1 bins][frames].
inline std::vector<std::vector<double>> stft_magnitude(std::span<const double> signal,
                                                       const SpectrogramConfig& cfg) {
    cfg.validate();
    const int len = int(signal.size());
    if (len < cfg.win_len)
        throw DimensionError("stft: signal length " + std::to_string(len) +
                             " shorter than window " + std::to_string(cfg.win_len));
    const int frames = (len - cfg.win_len) / cfg.hop + 1;
    const int bins = cfg.nfft / 2 + 1;
    const std::vector<double> window = hann_window(cfg.win_len);

    std::vector<std::vector<double>> mag(static_cast<size_t>(bins),
                                         std::vector<double>(static_cast<size_t>(frames)));
    std::vector<std::complex<double>> buf(static_cast<size_t>(cfg.nfft));
    for (int t = 0; t < frames; ++t) {
        std::fill(buf.begin(), buf.end(), std::complex<double>(0.0, 0.0));
        const int start = t * cfg.hop;
        for (int i = 0; i < cfg.win_len; ++i)
            buf[size_t(i)] = signal[size_t(start + i)] * window[size_t(i)];
        fft_radix2(buf);
        for (int f = 0; f < bins; ++f) mag[size_t(f)][size_t(t)] = std::abs(buf[size_t(f)]);
    }
    return mag;
}

// Log-amplitude spectrogram: 20*log10(|STFT|), clamped below at db_floor.
inline Tensor log_amp_spectrogram(std::span<const double> signal, const SpectrogramConfig& cfg) {
    const auto mag = stft_magnitude(signal, cfg);
    const int bins = int(mag.size());
    const int frames = int(mag[0].size());
    Tensor out = Tensor::zeros({bins, frames});
    double* o = out.data().data();
    for (int f = 0; f < bins; ++f)
        for (int t = 0; t < frames; ++t) {
            const double db = 20.0 * std::log10(mag[size_t(f)][size_t(t)]);
            o[int64_t(f) * frames + t] = std::max(db, cfg.db_floor);
        }
    return out;
}

namespace detail {

// Hamming-windowed sinc low-pass, unit DC gain.
inline std::vector<double> lowpass_taps(double cutoff_hz, double fs, int n_taps) {
    std::vector<double> h(static_cast<size_t>(n_taps));
    const int mid = (n_taps - 1) / 2;
    const double fc = cutoff_hz / fs;  // cycles per sample
    double sum = 0.0;
    for (int i = 0; i < n_taps; ++i) {
        const double x = 2.0 * fc * double(i - mid);
        const double sinc = x == 0.0 ? 1.0 : std::sin(M_PI * x) / (M_PI * x);
        const double hamming =
            0.54 - 0.46 * std::cos(2.0 * M_PI * double(i) / double(n_taps - 1));
        h[size_t(i)] = 2.0 * fc * sinc * hamming;
        sum += h[size_t(i)];
    }
    for (double& v : h) v /= sum;
    return h;
}

}  // namespace detail

// Integer-factor decimation with a zero-phase 31-tap anti-alias FIR (cutoff
// at the target Nyquist) and reflected-edge padding.
inline std::vector<double> downsample(std::span<const double> signal, int from_fs, int to_fs) {
    if (from_fs <= 0 || to_fs <= 0)
        throw ConfigurationError("downsample: frequencies must be positive");
    if (from_fs == to_fs) return std::vector<double>(signal.begin(), signal.end());
    if (from_fs % to_fs != 0)
        throw UnsupportedRatioError("downsample: " + std::to_string(from_fs) + " Hz to " +
                                    std::to_string(to_fs) +
                                    " Hz is not an integer decimation");
    const int ratio = from_fs / to_fs;
    const int len = int(signal.size());
    if (len == 0) return {};

    constexpr int kTaps = 31;
    const std::vector<double> h = detail::lowpass_taps(0.5 * double(to_fs), double(from_fs), kTaps);
    const int mid = (kTaps - 1) / 2;

    auto sample = [&](int i) {
        // Reflect around the edges: x[-k] -> x[k], x[len-1+k] -> x[len-1-k].
        if (i < 0) i = -i;
        if (i >= len) i = 2 * (len - 1) - i;
        i = std::clamp(i, 0, len - 1);
        return signal[size_t(i)];
    };

    const int out_len = (len + ratio - 1) / ratio;
    std::vector<double> out(static_cast<size_t>(out_len));
    for (int o = 0; o < out_len; ++o) {
        const int center = o * ratio;
        double acc = 0.0;
        for (int k = 0; k < kTaps; ++k) acc += h[size_t(k)] * sample(center + k - mid);
        out[size_t(o)] = acc;
    }
    return out;
}

// Majority label of a window; ties break toward the lowest label id.
inline int majority_label(std::span<const int> labels) {
    std::vector<std::pair<int, int>> counts;  // (label, count), labels are small ints
    for (int l : labels) {
        auto it = std::find_if(counts.begin(), counts.end(),
                               [&](const auto& p) { return p.first == l; });
        if (it == counts.end())
            counts.emplace_back(l, 1);
        else
            it->second++;
    }
    int best_label = labels[0];
    int best_count = 0;
    for (const auto& [label, count] : counts)
        if (count > best_count || (count == best_count && label < best_label)) {
            best_label = label;
            best_count = count;
        }
    return best_label;
}

// Cuts a stream into fixed-duration windows. `sensor_axes` gives the number
// of rows per sensor, in row order, and determines the context vector length.
// Samples are copied verbatim from their source offsets (no resampling).
inline std::vector<SensorWindow> window_stream(const RawStream& stream, double window_seconds,
                                               double overlap,
                                               const std::vector<int>& sensor_axes) {
    stream.validate();
    if (overlap < 0.0 || overlap >= 1.0)
        throw ConfigurationError("window_stream: overlap must be in [0, 1)");
    int total_axes = 0;
    for (int a : sensor_axes) total_axes += a;
    if (total_axes != int(stream.channels.size()))
        throw DimensionError("window_stream: sensor_axes do not sum to channel count");

    const int w = int(std::lround(window_seconds * stream.fs));
    if (w < 1) throw ConfigurationError("window_stream: window shorter than one sample");
    const int step = std::max(1, int(std::lround(double(w) * (1.0 - overlap))));
    const int len = int(stream.length());

    std::vector<SensorWindow> out;
    if (len < w) return out;
    const int count = (len - w) / step + 1;
    out.reserve(size_t(count));
    const int rows = int(stream.channels.size());
    for (int i = 0; i < count; ++i) {
        const int start = i * step;
        SensorWindow win;
        win.fs = stream.fs;
        win.context.assign(sensor_axes.size(), 1);
        win.data = Tensor::zeros({rows, w});
        double* d = win.data.data().data();
        for (int r = 0; r < rows; ++r)
            for (int t = 0; t < w; ++t)
                d[int64_t(r) * w + t] = stream.channels[size_t(r)][size_t(start + t)];
        win.label = majority_label(
            std::span<const int>(stream.labels.data() + start, size_t(w)));
        out.push_back(std::move(win));
    }
    return out;
}

}  // namespace fedfreq
