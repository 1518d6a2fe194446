#pragma once

#include <convo/array_io.hpp>
#include <convo/common.hpp>

#include <complex>
#include <filesystem>

namespace convo {

constexpr int kDefaultAudioDim = 80;

// Frame-aligned dyadic audio features. Stream 0 is the rendered agent
// ("self"), stream 1 the conversation partner. Both streams share d_a and
// T; frames are aligned to the 30 Hz motion clock.
struct AudioFeatures {
    Mat self;   // T x d_a
    Mat other;  // T x d_a

    int length() const { return (int)self.rows(); }
    int dim() const { return (int)self.cols(); }

    void validate() const {
        require(self.rows() == other.rows() && self.cols() == other.cols(),
                "audio streams must share d_a and T");
        require(all_finite(self) && all_finite(other), "audio features must be finite");
    }

    // stacked view used by conditioning encoders: T x (2*d_a)
    Mat stacked() const {
        Mat m(self.rows(), self.cols() * 2);
        m << self, other;
        return m;
    }

    AudioFeatures slice(int start, int len) const {
        AudioFeatures a;
        a.self = self.middleRows(start, len);
        a.other = other.middleRows(start, len);
        return a;
    }
};

struct Waveform {
    std::vector<float> samples;
    int rate = 16000;

    double duration() const { return rate > 0 ? (double)samples.size() / rate : 0.0; }
};

namespace detail {

// iterative radix-2 FFT, n must be a power of two
inline void fft_radix2(std::vector<std::complex<float>>& a) {
    size_t n = a.size();
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        float ang = -2.f * (float)M_PI / (float)len;
        std::complex<float> wl(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<float> w(1.f, 0.f);
            for (size_t k = 0; k < len / 2; ++k) {
                auto u = a[i + k], v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// triangular mel filterbank over an FFT of size n_fft at the given rate
inline std::vector<std::vector<float>> mel_filters(int bands, int n_fft, int rate) {
    int bins = n_fft / 2 + 1;
    double f_lo = 40.0, f_hi = std::min(7600.0, rate / 2.0);
    double m_lo = hz_to_mel(f_lo), m_hi = hz_to_mel(f_hi);
    std::vector<double> edges(bands + 2);
    for (int i = 0; i < bands + 2; ++i)
        edges[i] = mel_to_hz(m_lo + (m_hi - m_lo) * i / (bands + 1));
    std::vector<std::vector<float>> w(bands, std::vector<float>(bins, 0.f));
    for (int m = 0; m < bands; ++m) {
        double f0 = edges[m], f1 = edges[m + 1], f2 = edges[m + 2];
        for (int k = 0; k < bins; ++k) {
            double fk = (double)rate * k / n_fft;
            if (fk > f0 && fk < f1)
                w[m][k] = (float)((fk - f0) / (f1 - f0));
            else if (fk >= f1 && fk < f2)
                w[m][k] = (float)((f2 - fk) / (f2 - f1));
        }
    }
    return w;
}

// log filterbank energies at 30 Hz frame hop, then per-dim mean/variance
// normalization over the take (zero-variance dims pinned to zero)
inline Mat log_mel_frames(const Waveform& wav, int frames, int d_a) {
    int win = 1;
    int target = (int)std::lround(2.0 * wav.rate / kMotionFps);  // two frame periods
    while (win < target) win <<= 1;
    auto filters = mel_filters(d_a, win, wav.rate);
    std::vector<float> hann(win);
    for (int i = 0; i < win; ++i) hann[i] = 0.5f - 0.5f * std::cos(2.f * (float)M_PI * i / (win - 1));

    Mat feats(frames, d_a);
    std::vector<std::complex<float>> buf(win);
    for (int t = 0; t < frames; ++t) {
        size_t start = (size_t)std::floor((double)t * wav.rate / kMotionFps);
        for (int i = 0; i < win; ++i) {
            size_t idx = start + i;
            float s = idx < wav.samples.size() ? wav.samples[idx] : 0.f;
            buf[i] = std::complex<float>(s * hann[i], 0.f);
        }
        fft_radix2(buf);
        for (int m = 0; m < d_a; ++m) {
            double e = 0.0;
            const auto& w = filters[m];
            for (int k = 0; k <= win / 2; ++k) {
                if (w[k] == 0.f) continue;
                e += (double)w[k] * std::norm(buf[k]);
            }
            feats(t, m) = (float)std::log(e + 1e-10);
        }
    }
    for (int m = 0; m < d_a; ++m) {
        double mean = feats.col(m).cast<double>().mean();
        double var = (feats.col(m).cast<double>().array() - mean).square().mean();
        if (var < 1e-12) {
            feats.col(m).setZero();
        } else {
            // variance floor keeps near-silent takes from amplifying
            // their noise to unit scale
            float inv = (float)(1.0 / std::max(std::sqrt(var), 1.0));
            feats.col(m) = ((feats.col(m).array() - (float)mean) * inv).matrix();
        }
    }
    return feats;
}

}  // namespace detail

// Built-in spectral front end: log filterbank energies per stream at the
// motion frame rate. T = floor(duration * 30); both takes must cover the
// same duration within one motion frame.
inline AudioFeatures extract_features(const Waveform& wav_self, const Waveform& wav_other,
                                      int d_a = kDefaultAudioDim) {
    require(!wav_self.samples.empty() && !wav_other.samples.empty(), "empty waveform");
    require(wav_self.rate > 0 && wav_other.rate > 0, "waveform rate must be positive");
    double dur_self = wav_self.duration(), dur_other = wav_other.duration();
    require(std::fabs(dur_self - dur_other) <= 1.0 / kMotionFps + 1e-9, "unaligned dyad audio");
    long frames = std::min((long)(wav_self.samples.size() * (long long)kMotionFps / wav_self.rate),
                           (long)(wav_other.samples.size() * (long long)kMotionFps / wav_other.rate));
    require(frames >= 1, "audio shorter than one frame");
    AudioFeatures out;
    out.self = detail::log_mel_frames(wav_self, (int)frames, d_a);
    out.other = detail::log_mel_frames(wav_other, (int)frames, d_a);
    return out;
}

// Feature file: JSON header {streams, d_a, T, rate_hz} + float32 payload,
// stream 0 then stream 1, each row-major T x d_a. rate_hz other than 30
// is resampled to the motion clock by linear interpolation on load.
inline void save_external_features(const std::filesystem::path& path, const AudioFeatures& feats,
                                   float rate_hz = (float)kMotionFps) {
    feats.validate();
    Json h = {{"kind", "audio_features"},
              {"streams", 2},
              {"d_a", feats.dim()},
              {"T", feats.length()},
              {"rate_hz", rate_hz}};
    std::vector<float> buf;
    buf.reserve((size_t)2 * feats.length() * feats.dim());
    for (const Mat* m : {&feats.self, &feats.other})
        for (int r = 0; r < m->rows(); ++r)
            for (int c = 0; c < m->cols(); ++c) buf.push_back((*m)(r, c));
    write_array_file(path, h, buf.data(), buf.size());
}

namespace detail {

inline Mat resample_rows(const Mat& src, float src_hz, float dst_hz) {
    if (src_hz == dst_hz) return src;
    int t_out = (int)std::floor((double)src.rows() / src_hz * dst_hz);
    require(t_out >= 1, "resampled feature track is empty");
    Mat out(t_out, src.cols());
    for (int t = 0; t < t_out; ++t) {
        double u = (double)t * src_hz / dst_hz;
        int i0 = (int)std::floor(u);
        int i1 = std::min(i0 + 1, (int)src.rows() - 1);
        float frac = (float)(u - i0);
        out.row(t) = src.row(i0) * (1.f - frac) + src.row(i1) * frac;
    }
    return out;
}

}  // namespace detail

inline AudioFeatures load_external_features(const std::filesystem::path& path) {
    ArrayFile af = read_array_file(path);
    const Json& h = af.header;
    require(h.value("kind", "") == "audio_features", "malformed feature file: wrong kind");
    require(h.value("streams", 0) == 2, "malformed feature file: missing stream");
    int d_a = h.at("d_a").get<int>();
    int t = h.at("T").get<int>();
    float rate = h.value("rate_hz", (float)kMotionFps);
    require(d_a > 0 && t > 0, "malformed feature file: bad shape");
    require(af.data.size() == (size_t)2 * t * d_a, "malformed feature file: payload size mismatch");
    AudioFeatures feats;
    feats.self.resize(t, d_a);
    feats.other.resize(t, d_a);
    size_t idx = 0;
    for (Mat* m : {&feats.self, &feats.other})
        for (int r = 0; r < t; ++r)
            for (int c = 0; c < d_a; ++c) (*m)(r, c) = af.data[idx++];
    feats.validate();
    if (rate != (float)kMotionFps) {
        feats.self = detail::resample_rows(feats.self, rate, (float)kMotionFps);
        feats.other = detail::resample_rows(feats.other, rate, (float)kMotionFps);
    }
    return feats;
}

}  // namespace convo
