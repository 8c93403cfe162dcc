#include "mg/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>

namespace mg::data {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

void validate(const GenreSpec& spec, int sample_rate) {
    const double nyq = sample_rate / 2.0;
    if (!(spec.f_lo > 0 && spec.f_lo <= spec.f_hi && spec.f_hi < nyq))
        throw std::invalid_argument("genre spec '" + spec.name + "': frequency band outside (0, nyquist)");
    if (spec.amp_jitter_lo > spec.amp_jitter_hi || spec.noise_floor_lo > spec.noise_floor_hi)
        throw std::invalid_argument("genre spec '" + spec.name + "': invalid jitter interval");
    if (spec.kind == GeneratorKind::PulseTrain && spec.pulse_rate_hz <= 0)
        throw std::invalid_argument("genre spec '" + spec.name + "': pulse rate must be positive");
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b) {
    return splitmix64(splitmix64(master ^ splitmix64(a)) ^ splitmix64(b + 0x1234567ULL));
}

std::uint64_t derive_seed(std::uint64_t master, const std::string& tag) {
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (unsigned char c : tag) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return splitmix64(master ^ h);
}

audio::AudioClip synth_clip(const GenreSpec& spec, double duration_s, std::uint64_t seed,
                            int sample_rate) {
    if (duration_s < 1.0) throw std::invalid_argument("synth_clip: duration must be >= 1 s");
    validate(spec, sample_rate);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    const auto n = static_cast<std::int64_t>(std::llround(duration_s * sample_rate));
    audio::AudioClip clip;
    clip.sample_rate = sample_rate;
    clip.samples.assign(n, 0.0);
    auto& s = clip.samples;

    switch (spec.kind) {
        case GeneratorKind::HarmonicStack: {
            double f0 = spec.f_lo + unit(rng) * (spec.f_hi - spec.f_lo);
            for (int h = 1; h <= spec.harmonics; ++h) {
                double f = f0 * h;
                if (f >= sample_rate / 2.0) break;
                double phase = 2 * kPi * unit(rng);
                double amp = 1.0 / h;
                for (std::int64_t i = 0; i < n; ++i)
                    s[i] += amp * std::sin(2 * kPi * f * i / sample_rate + phase);
            }
            break;
        }
        case GeneratorKind::BandNoise: {
            const int tones = 256;
            for (int k = 0; k < tones; ++k) {
                double f = spec.f_lo + unit(rng) * (spec.f_hi - spec.f_lo);
                double phase = 2 * kPi * unit(rng);
                // z_i = exp(j(2*pi*f*i/sr + phase)) via rotation recurrence
                double zr = std::cos(phase), zi = std::sin(phase);
                const double wr = std::cos(2 * kPi * f / sample_rate);
                const double wi = std::sin(2 * kPi * f / sample_rate);
                for (std::int64_t i = 0; i < n; ++i) {
                    s[i] += zi;
                    const double nzr = zr * wr - zi * wi;
                    zi = zr * wi + zi * wr;
                    zr = nzr;
                }
            }
            break;
        }
        case GeneratorKind::PulseTrain: {
            const double period = sample_rate / spec.pulse_rate_hz;
            const auto burst = static_cast<std::int64_t>(0.002 * sample_rate);
            std::normal_distribution<double> g(0.0, 1.0);
            double offset = unit(rng) * period;
            for (double start = offset; start < static_cast<double>(n); start += period) {
                auto i0 = static_cast<std::int64_t>(start);
                for (std::int64_t i = 0; i < burst && i0 + i < n; ++i)
                    s[i0 + i] += g(rng) * std::exp(-static_cast<double>(i) / (0.3 * burst));
            }
            break;
        }
        case GeneratorKind::Chirp: {
            double f0 = spec.f_lo, f1 = spec.f_hi;
            double jitter = 0.9 + 0.2 * unit(rng);  // stretch the sweep slightly per clip
            double phase0 = 2 * kPi * unit(rng);
            const double T = duration_s;
            for (std::int64_t i = 0; i < n; ++i) {
                double t = static_cast<double>(i) / sample_rate;
                double phase = phase0 + 2 * kPi * (f0 * t + jitter * (f1 - f0) * t * t / (2 * T));
                s[i] = std::sin(phase);
            }
            break;
        }
    }

    std::normal_distribution<double> g(0.0, 1.0);
    double floor_amp = spec.noise_floor_lo + unit(rng) * (spec.noise_floor_hi - spec.noise_floor_lo);
    for (std::int64_t i = 0; i < n; ++i) s[i] += floor_amp * g(rng);

    double peak = 0;
    for (double v : s) peak = std::max(peak, std::abs(v));
    double amp = spec.amp_jitter_lo + unit(rng) * (spec.amp_jitter_hi - spec.amp_jitter_lo);
    double k = peak > 0 ? 0.9 * amp / peak : 0.0;
    for (double& v : s) v *= k;
    return clip;
}

LabeledDataset generate_dataset(const std::vector<GenreSpec>& specs, int clips_per_class,
                                double duration_s, std::uint64_t seed, int sample_rate) {
    if (specs.size() < 2) throw std::invalid_argument("generate_dataset: need >= 2 genre specs");
    if (clips_per_class < 2) throw std::invalid_argument("generate_dataset: need >= 2 clips per class");
    LabeledDataset ds;
    for (const auto& spec : specs) ds.class_names.push_back(spec.name);
    int source = 0;
    for (size_t c = 0; c < specs.size(); ++c)
        for (int i = 0; i < clips_per_class; ++i) {
            ds.clips.push_back(synth_clip(specs[c], duration_s, derive_seed(seed, c, i), sample_rate));
            ds.labels.push_back(static_cast<int>(c));
            ds.source_ids.push_back(source++);
        }
    return ds;
}

SplitMasks split_dataset(const LabeledDataset& dataset, double test_fraction,
                         double labeled_fraction, std::uint64_t seed) {
    if (!(test_fraction > 0 && test_fraction < 1) || !(labeled_fraction > 0 && labeled_fraction <= 1))
        throw std::invalid_argument("split_dataset: fractions out of range");
    const size_t n = dataset.size();

    // operate on sources so segments never straddle a boundary
    std::map<int, int> source_label;  // ordered for determinism
    for (size_t i = 0; i < n; ++i) source_label[dataset.source_ids[i]] = dataset.labels[i];

    std::map<int, std::vector<int>> by_class;  // class -> source ids
    for (auto& [src, lab] : source_label) by_class[lab].push_back(src);

    std::vector<std::uint8_t> src_test, src_labeled;  // indexed by source id
    int max_src = 0;
    for (auto& [src, lab] : source_label) max_src = std::max(max_src, src);
    src_test.assign(max_src + 1, 0);
    src_labeled.assign(max_src + 1, 0);

    // largest-remainder apportionment: per-class counts differ by <= 1 on
    // balanced input while the global count matches round(fraction * total)
    auto apportion = [](const std::vector<size_t>& pools, double fraction) {
        size_t total = std::accumulate(pools.begin(), pools.end(), size_t{0});
        auto want = static_cast<size_t>(std::lround(fraction * static_cast<double>(total)));
        std::vector<size_t> out(pools.size());
        std::vector<std::pair<double, size_t>> rem;
        size_t assigned = 0;
        for (size_t c = 0; c < pools.size(); ++c) {
            double target = fraction * static_cast<double>(pools[c]);
            out[c] = static_cast<size_t>(std::floor(target));
            assigned += out[c];
            rem.emplace_back(target - std::floor(target), c);
        }
        std::stable_sort(rem.begin(), rem.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        for (size_t i = 0; i < rem.size() && assigned < want; ++i, ++assigned) ++out[rem[i].second];
        return out;
    };

    std::vector<int> classes;
    std::vector<size_t> pools;
    for (auto& [cls, sources] : by_class) {
        if (sources.size() < 2)
            throw std::invalid_argument("split_dataset: class " + std::to_string(cls) +
                                        " has fewer than 2 sources; stratification infeasible");
        classes.push_back(cls);
        pools.push_back(sources.size());
    }
    std::vector<size_t> n_test_per = apportion(pools, test_fraction);
    std::vector<size_t> train_pools(pools.size());
    for (size_t c = 0; c < pools.size(); ++c) {
        n_test_per[c] = std::clamp<size_t>(n_test_per[c], 1, pools[c] - 1);
        train_pools[c] = pools[c] - n_test_per[c];
    }
    std::vector<size_t> n_lab_per = apportion(train_pools, labeled_fraction);
    for (size_t c = 0; c < pools.size(); ++c) {
        n_lab_per[c] = std::clamp<size_t>(n_lab_per[c], 1, train_pools[c]);
        auto& sources = by_class[classes[c]];
        std::mt19937_64 rng(derive_seed(seed, 0xbeef, static_cast<std::uint64_t>(classes[c])));
        std::shuffle(sources.begin(), sources.end(), rng);
        for (size_t i = 0; i < n_test_per[c]; ++i) src_test[sources[i]] = 1;
        for (size_t i = n_test_per[c]; i < n_test_per[c] + n_lab_per[c]; ++i) src_labeled[sources[i]] = 1;
    }

    SplitMasks m;
    m.test_mask.assign(n, 0);
    m.train_mask.assign(n, 0);
    m.unlabeled_mask.assign(n, 0);
    for (size_t i = 0; i < n; ++i) {
        int src = dataset.source_ids[i];
        if (src_test[src])
            m.test_mask[i] = 1;
        else if (src_labeled[src])
            m.train_mask[i] = 1;
        else
            m.unlabeled_mask[i] = 1;
    }
    return m;
}

LabeledDataset load_gtzan_layout(const std::string& root_dir, double segment_seconds) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root_dir))
        throw std::runtime_error("load_gtzan_layout: not a directory: " + root_dir);

    std::vector<std::string> genres;
    for (const auto& e : fs::directory_iterator(root_dir))
        if (e.is_directory()) genres.push_back(e.path().filename().string());
    std::sort(genres.begin(), genres.end());
    if (genres.empty())
        throw std::runtime_error("load_gtzan_layout: no genre directories under " + root_dir);

    LabeledDataset ds;
    ds.class_names = genres;
    int source = 0;
    for (size_t c = 0; c < genres.size(); ++c) {
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(fs::path(root_dir) / genres[c]))
            if (e.is_regular_file()) files.push_back(e.path().string());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            audio::AudioClip clip;
            try {
                clip = audio::load_wav(f);
            } catch (const audio::WavError& e) {
                std::cerr << "warning: skipping unreadable WAV " << f << ": " << e.what() << "\n";
                ++ds.num_warnings;
                continue;
            }
            const auto seg_len = static_cast<std::int64_t>(segment_seconds * clip.sample_rate);
            const auto n_seg = static_cast<std::int64_t>(clip.samples.size()) / seg_len;
            for (std::int64_t s = 0; s < n_seg; ++s) {
                audio::AudioClip seg;
                seg.sample_rate = clip.sample_rate;
                seg.samples.assign(clip.samples.begin() + s * seg_len,
                                   clip.samples.begin() + (s + 1) * seg_len);
                ds.clips.push_back(std::move(seg));
                ds.labels.push_back(static_cast<int>(c));
                ds.source_ids.push_back(source);
            }
            ++source;
        }
    }
    if (ds.clips.empty()) throw std::runtime_error("load_gtzan_layout: no readable audio in " + root_dir);
    return ds;
}

std::vector<GenreSpec> default_synthetic_specs() {
    // near-silent floors keep the log-mel background dark, so class energy
    // stays localized in its band (the Grad-CAM band assertions depend on it)
    std::vector<GenreSpec> specs(4);
    specs[0] = {.name = "harmonic", .kind = GeneratorKind::HarmonicStack, .f_lo = 110, .f_hi = 440,
                .noise_floor_lo = 1e-5, .noise_floor_hi = 5e-5};
    specs[1] = {.name = "highband", .kind = GeneratorKind::BandNoise, .f_lo = 4000, .f_hi = 8000,
                .noise_floor_lo = 1e-5, .noise_floor_hi = 5e-5};
    specs[2] = {.name = "pulse", .kind = GeneratorKind::PulseTrain, .f_lo = 100, .f_hi = 8000,
                .pulse_rate_hz = 4.0, .noise_floor_lo = 1e-5, .noise_floor_hi = 5e-5};
    specs[3] = {.name = "chirp", .kind = GeneratorKind::Chirp, .f_lo = 500, .f_hi = 5000,
                .noise_floor_lo = 1e-5, .noise_floor_hi = 5e-5};
    return specs;
}

std::vector<GenreSpec> confusable_synthetic_specs() {
    // pairs of same-kind classes whose frequency ranges overlap, over a loud
    // broadband floor: a fraction of clips is genuinely ambiguous, so accuracy
    // degrades with the labeled fraction instead of saturating
    std::vector<GenreSpec> specs(4);
    specs[0] = {.name = "lowstack", .kind = GeneratorKind::HarmonicStack, .f_lo = 110, .f_hi = 520,
                .noise_floor_lo = 0.05, .noise_floor_hi = 0.15};
    specs[1] = {.name = "midstack", .kind = GeneratorKind::HarmonicStack, .f_lo = 330,
                .f_hi = 1040, .noise_floor_lo = 0.05, .noise_floor_hi = 0.15};
    specs[2] = {.name = "noiselo", .kind = GeneratorKind::BandNoise, .f_lo = 800, .f_hi = 3800,
                .noise_floor_lo = 0.05, .noise_floor_hi = 0.15};
    specs[3] = {.name = "noisehi", .kind = GeneratorKind::BandNoise, .f_lo = 2200, .f_hi = 6500,
                .noise_floor_lo = 0.05, .noise_floor_hi = 0.15};
    return specs;
}

double band_energy_fraction(const audio::AudioClip& clip, double f_lo, double f_hi) {
    size_t n = 1;
    while (n * 2 <= clip.samples.size()) n *= 2;
    std::vector<double> re(clip.samples.begin(), clip.samples.begin() + n), im(n, 0.0);
    audio::fft(re, im);
    double total = 0, band = 0;
    for (size_t k = 0; k <= n / 2; ++k) {
        double f = static_cast<double>(k) * clip.sample_rate / static_cast<double>(n);
        double p = re[k] * re[k] + im[k] * im[k];
        total += p;
        if (f >= f_lo && f <= f_hi) band += p;
    }
    return total > 0 ? band / total : 0.0;
}

void save_manifest_csv(const LabeledDataset& dataset, const SplitMasks& masks,
                       const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write manifest: " + path);
    os << "clip,source,class,class_name,split,labeled\n";
    for (size_t i = 0; i < dataset.size(); ++i) {
        const char* split = masks.test_mask[i] ? "test" : "train";
        os << i << "," << dataset.source_ids[i] << "," << dataset.labels[i] << ","
           << dataset.class_names[dataset.labels[i]] << "," << split << ","
           << (masks.train_mask[i] ? 1 : 0) << "\n";
    }
}

}  // namespace mg::data
