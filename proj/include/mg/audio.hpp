#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "mg/tensor.hpp"

namespace mg::audio {

class WavError : public std::runtime_error {
public:
    enum class Kind { MissingFile, UnsupportedEncoding, EmptyAudio, BadFormat };
    WavError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
    Kind kind;
};

struct AudioClip {
    std::vector<double> samples;  // mono, [-1, 1]
    int sample_rate = 0;
    double duration_s() const {
        return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
    }
};

// RIFF PCM16 mono/stereo; stereo is mixed to mono by channel mean.
AudioClip load_wav(const std::string& path);
void save_wav(const AudioClip& clip, const std::string& path);

struct SpectrogramConfig {
    int sample_rate = 22050;
    int n_fft = 1024;  // power of two
    int hop = 512;
    int n_mels = 128;
    double f_min = 0.0;
    double f_max = 8000.0;
};

struct MelFilterbank {
    Tensor weights;  // [n_mels x n_bins]
    std::vector<double> center_freqs_hz;
};

// HTK mel scale
double hz_to_mel(double f);
double mel_to_hz(double m);

// Triangular filters, centers uniformly spaced on the mel scale.
MelFilterbank mel_filterbank(const SpectrogramConfig& config);

struct MelSpectrogram {
    Tensor values;  // [n_mels x n_frames], normalized to [0,1]
    SpectrogramConfig config;
    int n_mels() const { return values.dim(0); }
    int n_frames() const { return values.dim(1); }
};

// Hann STFT power -> mel projection -> log10 with 1e-10 floor -> min-max to [0,1].
MelSpectrogram mel_spectrogram(const AudioClip& clip, const SpectrogramConfig& config);

// Center-crop or symmetric zero-pad along the frame axis to exactly `frames`.
MelSpectrogram fixed_size_crop(const MelSpectrogram& spec, int frames);

// In-place radix-2 complex FFT; n must be a power of two. Shared with datagen's
// band-energy oracle.
void fft(std::vector<double>& re, std::vector<double>& im);

int num_frames(std::int64_t samples, int n_fft, int hop);

}  // namespace mg::audio
