#include "mg/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace mg::audio {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::uint32_t rd_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (p[1] << 8) | (p[2] << 16) |
           (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint16_t rd_u16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

}  // namespace

AudioClip load_wav(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw WavError(WavError::Kind::MissingFile, "no such WAV file: " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (buf.size() < 44 || std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
        throw WavError(WavError::Kind::BadFormat, "not a RIFF/WAVE file: " + path);

    int channels = 0, bits = 0, sample_rate = 0, format = 0;
    const unsigned char* data = nullptr;
    std::uint32_t data_len = 0;
    size_t pos = 12;
    while (pos + 8 <= buf.size()) {
        std::uint32_t chunk_len = rd_u32(buf.data() + pos + 4);
        if (std::memcmp(buf.data() + pos, "fmt ", 4) == 0 && pos + 8 + 16 <= buf.size()) {
            const unsigned char* f = buf.data() + pos + 8;
            format = rd_u16(f);
            channels = rd_u16(f + 2);
            sample_rate = static_cast<int>(rd_u32(f + 4));
            bits = rd_u16(f + 14);
        } else if (std::memcmp(buf.data() + pos, "data", 4) == 0) {
            data = buf.data() + pos + 8;
            data_len = std::min<std::uint32_t>(chunk_len, static_cast<std::uint32_t>(buf.size() - pos - 8));
        }
        pos += 8 + chunk_len + (chunk_len & 1);
    }
    if (format != 1 || bits != 16)
        throw WavError(WavError::Kind::UnsupportedEncoding,
                       "only PCM16 WAV supported (format=" + std::to_string(format) +
                           ", bits=" + std::to_string(bits) + "): " + path);
    if (channels < 1 || channels > 2)
        throw WavError(WavError::Kind::UnsupportedEncoding, "mono or stereo only: " + path);
    if (!data || data_len < 2 * static_cast<std::uint32_t>(channels))
        throw WavError(WavError::Kind::EmptyAudio, "zero-length audio: " + path);

    const std::uint32_t n = data_len / (2 * channels);
    AudioClip clip;
    clip.sample_rate = sample_rate;
    clip.samples.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        double acc = 0;
        for (int c = 0; c < channels; ++c) {
            std::int16_t s = static_cast<std::int16_t>(rd_u16(data + (i * channels + c) * 2));
            acc += static_cast<double>(s) / 32768.0;
        }
        clip.samples[i] = acc / channels;
    }
    return clip;
}

void save_wav(const AudioClip& clip, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open WAV for write: " + path);
    const std::uint32_t n = static_cast<std::uint32_t>(clip.samples.size());
    const std::uint32_t data_len = n * 2;
    auto w32 = [&](std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
        os.write(reinterpret_cast<char*>(b), 4);
    };
    auto w16 = [&](std::uint16_t v) {
        unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
        os.write(reinterpret_cast<char*>(b), 2);
    };
    os.write("RIFF", 4);
    w32(36 + data_len);
    os.write("WAVE", 4);
    os.write("fmt ", 4);
    w32(16);
    w16(1);  // PCM
    w16(1);  // mono
    w32(static_cast<std::uint32_t>(clip.sample_rate));
    w32(static_cast<std::uint32_t>(clip.sample_rate) * 2);
    w16(2);
    w16(16);
    os.write("data", 4);
    w32(data_len);
    for (double s : clip.samples) {
        double v = std::clamp(s, -1.0, 1.0);
        auto q = static_cast<std::int16_t>(std::lround(v * 32767.0));
        w16(static_cast<std::uint16_t>(q));
    }
}

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

MelFilterbank mel_filterbank(const SpectrogramConfig& config) {
    if (!(config.f_min >= 0 && config.f_min < config.f_max &&
          config.f_max <= config.sample_rate / 2.0))
        throw std::invalid_argument("mel_filterbank: need 0 <= f_min < f_max <= sample_rate/2");
    if (config.n_mels < 2) throw std::invalid_argument("mel_filterbank: n_mels >= 2 required");

    const int n_bins = config.n_fft / 2 + 1;
    const double mel_lo = hz_to_mel(config.f_min);
    const double mel_hi = hz_to_mel(config.f_max);
    std::vector<double> edges(config.n_mels + 2);
    for (int i = 0; i < config.n_mels + 2; ++i)
        edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (config.n_mels + 1));

    MelFilterbank fb;
    fb.weights = Tensor({config.n_mels, n_bins});
    fb.center_freqs_hz.assign(edges.begin() + 1, edges.end() - 1);
    const double bin_hz = static_cast<double>(config.sample_rate) / config.n_fft;
    for (int m = 0; m < config.n_mels; ++m) {
        const double fl = edges[m], fc = edges[m + 1], fr = edges[m + 2];
        for (int b = 0; b < n_bins; ++b) {
            double f = b * bin_hz;
            double w = 0;
            if (f > fl && f < fc)
                w = (f - fl) / (fc - fl);
            else if (f >= fc && f < fr)
                w = (fr - f) / (fr - fc);
            fb.weights.at(m, b) = w;
        }
        // each triangle must cover at least one FFT bin
        bool any = false;
        for (int b = 0; b < n_bins; ++b)
            if (fb.weights.at(m, b) > 0) any = true;
        if (!any)
            throw std::invalid_argument("mel_filterbank: filter " + std::to_string(m) +
                                        " covers no FFT bin; increase n_fft or decrease n_mels");
    }
    return fb;
}

void fft(std::vector<double>& re, std::vector<double>& im) {
    const size_t n = re.size();
    if (n == 0 || (n & (n - 1)) != 0 || im.size() != n)
        throw std::invalid_argument("fft: size must be a power of two");
    // bit reversal
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            std::swap(re[i], re[j]);
            std::swap(im[i], im[j]);
        }
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * kPi / static_cast<double>(len);
        const double wr = std::cos(ang), wi = std::sin(ang);
        for (size_t i = 0; i < n; i += len) {
            double cr = 1, ci = 0;
            for (size_t k = 0; k < len / 2; ++k) {
                const size_t a = i + k, b = i + k + len / 2;
                const double tr = re[b] * cr - im[b] * ci;
                const double ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                const double ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
    }
}

int num_frames(std::int64_t samples, int n_fft, int hop) {
    if (samples < n_fft) return 0;
    return 1 + static_cast<int>((samples - n_fft) / hop);
}

MelSpectrogram mel_spectrogram(const AudioClip& clip, const SpectrogramConfig& config) {
    if (clip.sample_rate != config.sample_rate)
        throw std::invalid_argument("mel_spectrogram: clip sample rate " + std::to_string(clip.sample_rate) +
                                    " does not match config " + std::to_string(config.sample_rate) +
                                    " (resampling is not supported)");
    const int frames = num_frames(static_cast<std::int64_t>(clip.samples.size()), config.n_fft, config.hop);
    if (frames < 1)
        throw std::invalid_argument("mel_spectrogram: clip shorter than one frame (" +
                                    std::to_string(clip.samples.size()) + " < " +
                                    std::to_string(config.n_fft) + " samples)");
    const int n_bins = config.n_fft / 2 + 1;
    MelFilterbank fb = mel_filterbank(config);

    // periodic Hann window
    std::vector<double> window(config.n_fft);
    for (int i = 0; i < config.n_fft; ++i)
        window[i] = 0.5 * (1.0 - std::cos(2.0 * kPi * i / config.n_fft));

    Tensor power({n_bins, frames});
    std::vector<double> re(config.n_fft), im(config.n_fft);
    for (int t = 0; t < frames; ++t) {
        const double* src = clip.samples.data() + static_cast<std::int64_t>(t) * config.hop;
        for (int i = 0; i < config.n_fft; ++i) {
            re[i] = src[i] * window[i];
            im[i] = 0.0;
        }
        fft(re, im);
        for (int b = 0; b < n_bins; ++b) power.at(b, t) = re[b] * re[b] + im[b] * im[b];
    }

    MelSpectrogram out;
    out.config = config;
    out.values = Tensor({config.n_mels, frames});
    for (int m = 0; m < config.n_mels; ++m)
        for (int t = 0; t < frames; ++t) {
            double e = 0;
            for (int b = 0; b < n_bins; ++b) e += fb.weights.at(m, b) * power.at(b, t);
            out.values.at(m, t) = std::log10(std::max(e, 1e-10));
        }

    const double lo = out.values.min(), hi = out.values.max();
    const double range = hi - lo;
    for (std::int64_t i = 0; i < out.values.numel(); ++i)
        out.values[i] = range > 0 ? (out.values[i] - lo) / range : 0.0;
    return out;
}

MelSpectrogram fixed_size_crop(const MelSpectrogram& spec, int frames) {
    if (frames <= 0) throw std::invalid_argument("fixed_size_crop: frames must be positive");
    const int rows = spec.n_mels(), cols = spec.n_frames();
    MelSpectrogram out;
    out.config = spec.config;
    out.values = Tensor({rows, frames});
    if (cols >= frames) {
        const int start = (cols - frames) / 2;
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < frames; ++c) out.values.at(r, c) = spec.values.at(r, start + c);
    } else {
        const int pad_left = (frames - cols) / 2;
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) out.values.at(r, pad_left + c) = spec.values.at(r, c);
    }
    return out;
}

}  // namespace mg::audio
