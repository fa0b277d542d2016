// Declarative experiment description and its key=value file grammar. The
// canonical serialization (sorted keys, round-trippable doubles, out_dir
// excluded) doubles as the provenance record and the config hash input.
#pragma once

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fedfreq/data.hpp"
#include "fedfreq/model.hpp"
#include "fedfreq/rng.hpp"
#include "fedfreq/serialize.hpp"

namespace fedfreq {

inline const std::vector<std::string>& all_matrix_configs() {
    static const std::vector<std::string> names = {"low-only",  "down-low",   "high-only",
                                                   "multi@low", "multi@high", "ideal-high"};
    return names;
}

struct ExperimentConfig {
    // dataset source
    std::string dataset = "synth";  // synth | manifest
    std::string manifest_path;

    // synthetic generator
    int synth_participants = 14;
    double synth_seconds_per_class = 24.0;
    int synth_fs_base = 120;
    double synth_noise = 0.4;
    double synth_amp_jitter = 0.3;
    double synth_freq_jitter = 0.05;
    std::string synth_preset = "balanced";  // balanced | imbalanced
    uint64_t synth_seed = 1001;

    // frequency scenario and windowing
    int low_fs = 5;
    int high_fs = 40;
    double window_seconds = 2.0;
    double overlap = 0.5;

    // split protocol
    std::string split_protocol = "monte_carlo";  // monte_carlo | kfold
    int split_folds = 10;
    double train_frac = 0.7;

    // model
    int latent_dim = 64;
    int spec_fc_dim = 64;
    int head_width = 128;
    std::vector<int> temporal_channels = {16, 16, 32, 32};
    int temporal_kernel = 3;
    std::vector<int> spectral_channels = {8, 16, 16};
    int pool_window = 2;
    int pool_stride = 2;
    std::map<int, SpectrogramConfig> spec_overrides;  // per fs

    HyperParams hp;

    // run
    std::string mode = "federated";  // federated | centralized
    int rounds = 10;
    uint64_t seed = 7;
    std::vector<std::string> configs = all_matrix_configs();
    std::vector<int> ablation_counts = {2, 3, 4, 6, 8};
    int ablation_folds = 0;  // 0: every fold of the split plan
    std::string out_dir = "runs/out";

    SpectrogramConfig spectrogram_for(int fs) const {
        auto it = spec_overrides.find(fs);
        return it != spec_overrides.end() ? it->second : default_spectrogram_config(fs);
    }

    void validate() const {
        if (dataset != "synth" && dataset != "manifest")
            throw ConfigurationError("config: dataset must be synth or manifest");
        if (dataset == "manifest" && manifest_path.empty())
            throw ConfigurationError("config: manifest_path required when dataset = manifest");
        if (low_fs <= 0 || high_fs <= 0)
            throw ConfigurationError("config: frequencies must be positive");
        if (split_protocol != "monte_carlo" && split_protocol != "kfold")
            throw ConfigurationError("config: split.protocol must be monte_carlo or kfold");
        if (mode != "federated" && mode != "centralized")
            throw ConfigurationError("config: mode must be federated or centralized");
        if (rounds < 0) throw ConfigurationError("config: rounds must be >= 0");
        if (split_folds < 1) throw ConfigurationError("config: split.folds must be >= 1");
        for (const std::string& c : configs) {
            bool known = false;
            for (const std::string& k : all_matrix_configs()) known |= (k == c);
            if (!known) throw ConfigurationError("config: unknown matrix configuration '" + c + "'");
        }
        hp.validate();
    }
};

namespace detail {

// Shortest decimal text that parses back to the same double.
inline std::string fmt_double(double v) {
    char buf[40];
    for (int prec = 15; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

inline std::string fmt_int_list(const std::vector<int>& xs) {
    std::string out;
    for (size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + std::to_string(xs[i]);
    return out;
}

inline std::vector<int> parse_int_list(const std::string& s, const std::string& what) {
    std::vector<int> out;
    for (const std::string& item : split_list(s)) {
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw ConfigurationError("config: bad integer '" + item + "' in " + what);
        }
    }
    if (out.empty()) throw ConfigurationError("config: empty list for " + what);
    return out;
}

}  // namespace detail

// Canonical key=value serialization: sorted keys, out_dir omitted. Two runs
// of the same experiment hash identically regardless of where they write.
inline std::string canonical_config_text(const ExperimentConfig& c) {
    using detail::fmt_double;
    using detail::fmt_int_list;
    std::map<std::string, std::string> kv;
    kv["dataset"] = c.dataset;
    if (!c.manifest_path.empty()) kv["manifest_path"] = c.manifest_path;
    kv["synth.participants"] = std::to_string(c.synth_participants);
    kv["synth.seconds_per_class"] = fmt_double(c.synth_seconds_per_class);
    kv["synth.fs_base"] = std::to_string(c.synth_fs_base);
    kv["synth.noise"] = fmt_double(c.synth_noise);
    kv["synth.amp_jitter"] = fmt_double(c.synth_amp_jitter);
    kv["synth.freq_jitter"] = fmt_double(c.synth_freq_jitter);
    kv["synth.preset"] = c.synth_preset;
    kv["synth.seed"] = std::to_string(c.synth_seed);
    kv["low_fs"] = std::to_string(c.low_fs);
    kv["high_fs"] = std::to_string(c.high_fs);
    kv["window_seconds"] = fmt_double(c.window_seconds);
    kv["overlap"] = fmt_double(c.overlap);
    kv["split.protocol"] = c.split_protocol;
    kv["split.folds"] = std::to_string(c.split_folds);
    kv["split.train_frac"] = fmt_double(c.train_frac);
    kv["model.latent_dim"] = std::to_string(c.latent_dim);
    kv["model.spec_fc_dim"] = std::to_string(c.spec_fc_dim);
    kv["model.head_width"] = std::to_string(c.head_width);
    kv["model.temporal_channels"] = fmt_int_list(c.temporal_channels);
    kv["model.temporal_kernel"] = std::to_string(c.temporal_kernel);
    kv["model.spectral_channels"] = fmt_int_list(c.spectral_channels);
    kv["model.pool_window"] = std::to_string(c.pool_window);
    kv["model.pool_stride"] = std::to_string(c.pool_stride);
    std::map<int, SpectrogramConfig> specs = c.spec_overrides;
    specs.emplace(c.low_fs, c.spectrogram_for(c.low_fs));
    specs.emplace(c.high_fs, c.spectrogram_for(c.high_fs));
    for (const auto& [fs, sc] : specs)
        kv["spec." + std::to_string(fs)] = std::to_string(sc.win_len) + "," +
                                           std::to_string(sc.hop) + "," +
                                           std::to_string(sc.nfft);
    kv["hp.learning_rate"] = fmt_double(c.hp.learning_rate);
    kv["hp.batch_size"] = std::to_string(c.hp.batch_size);
    kv["hp.l2_rate"] = fmt_double(c.hp.l2_rate);
    kv["hp.dropout_rate"] = fmt_double(c.hp.dropout_rate);
    kv["hp.adam_beta1"] = fmt_double(c.hp.adam_beta1);
    kv["hp.adam_beta2"] = fmt_double(c.hp.adam_beta2);
    kv["hp.adam_eps"] = fmt_double(c.hp.adam_eps);
    kv["hp.leaky_slope"] = fmt_double(c.hp.leaky_slope);
    kv["mode"] = c.mode;
    kv["rounds"] = std::to_string(c.rounds);
    kv["seed"] = std::to_string(c.seed);
    std::string cfgs;
    for (size_t i = 0; i < c.configs.size(); ++i) cfgs += (i ? "," : "") + c.configs[i];
    kv["configs"] = cfgs;
    kv["ablation.counts"] = fmt_int_list(c.ablation_counts);
    kv["ablation.folds"] = std::to_string(c.ablation_folds);

    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
}

inline std::string config_hash(const ExperimentConfig& c) {
    return hex64(fnv1a(canonical_config_text(c)));
}

inline void apply_config_line(ExperimentConfig& c, const std::string& key,
                              const std::string& value, const std::string& where) {
    auto bad = [&](const std::string& what) {
        return ConfigurationError("config " + where + ": " + what);
    };
    auto to_int = [&](const std::string& v) {
        try {
            return std::stoi(v);
        } catch (const std::exception&) {
            throw bad("bad integer '" + v + "' for key '" + key + "'");
        }
    };
    auto to_double = [&](const std::string& v) {
        try {
            return std::stod(v);
        } catch (const std::exception&) {
            throw bad("bad number '" + v + "' for key '" + key + "'");
        }
    };
    auto to_u64 = [&](const std::string& v) {
        try {
            return uint64_t(std::stoull(v));
        } catch (const std::exception&) {
            throw bad("bad seed '" + v + "' for key '" + key + "'");
        }
    };

    if (key == "dataset") c.dataset = value;
    else if (key == "manifest_path") c.manifest_path = value;
    else if (key == "synth.participants") c.synth_participants = to_int(value);
    else if (key == "synth.seconds_per_class") c.synth_seconds_per_class = to_double(value);
    else if (key == "synth.fs_base") c.synth_fs_base = to_int(value);
    else if (key == "synth.noise") c.synth_noise = to_double(value);
    else if (key == "synth.amp_jitter") c.synth_amp_jitter = to_double(value);
    else if (key == "synth.freq_jitter") c.synth_freq_jitter = to_double(value);
    else if (key == "synth.preset") c.synth_preset = value;
    else if (key == "synth.seed") c.synth_seed = to_u64(value);
    else if (key == "low_fs") c.low_fs = to_int(value);
    else if (key == "high_fs") c.high_fs = to_int(value);
    else if (key == "window_seconds") c.window_seconds = to_double(value);
    else if (key == "overlap") c.overlap = to_double(value);
    else if (key == "split.protocol") c.split_protocol = value;
    else if (key == "split.folds") c.split_folds = to_int(value);
    else if (key == "split.train_frac") c.train_frac = to_double(value);
    else if (key == "model.latent_dim") c.latent_dim = to_int(value);
    else if (key == "model.spec_fc_dim") c.spec_fc_dim = to_int(value);
    else if (key == "model.head_width") c.head_width = to_int(value);
    else if (key == "model.temporal_channels")
        c.temporal_channels = detail::parse_int_list(value, key);
    else if (key == "model.temporal_kernel") c.temporal_kernel = to_int(value);
    else if (key == "model.spectral_channels")
        c.spectral_channels = detail::parse_int_list(value, key);
    else if (key == "model.pool_window") c.pool_window = to_int(value);
    else if (key == "model.pool_stride") c.pool_stride = to_int(value);
    else if (key.rfind("spec.", 0) == 0) {
        const int fs = to_int(key.substr(5));
        const auto parts = detail::parse_int_list(value, key);
        if (parts.size() != 3) throw bad("'" + key + "' expects win,hop,nfft");
        SpectrogramConfig sc;
        sc.win_len = parts[0];
        sc.hop = parts[1];
        sc.nfft = parts[2];
        c.spec_overrides[fs] = sc;
    } else if (key == "hp.learning_rate") c.hp.learning_rate = to_double(value);
    else if (key == "hp.batch_size") c.hp.batch_size = to_int(value);
    else if (key == "hp.l2_rate") c.hp.l2_rate = to_double(value);
    else if (key == "hp.dropout_rate") c.hp.dropout_rate = to_double(value);
    else if (key == "hp.adam_beta1") c.hp.adam_beta1 = to_double(value);
    else if (key == "hp.adam_beta2") c.hp.adam_beta2 = to_double(value);
    else if (key == "hp.adam_eps") c.hp.adam_eps = to_double(value);
    else if (key == "hp.leaky_slope") c.hp.leaky_slope = to_double(value);
    else if (key == "mode") c.mode = value;
    else if (key == "rounds") c.rounds = to_int(value);
    else if (key == "seed") c.seed = to_u64(value);
    else if (key == "configs") {
        if (value == "all") c.configs = all_matrix_configs();
        else c.configs = detail::split_list(value);
    } else if (key == "ablation.counts")
        c.ablation_counts = detail::parse_int_list(value, key);
    else if (key == "ablation.folds") c.ablation_folds = to_int(value);
    else if (key == "out_dir") c.out_dir = value;
    else throw bad("unknown key '" + key + "'");
}

inline ExperimentConfig parse_config_text(const std::string& text, const std::string& where) {
    ExperimentConfig c;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigurationError("config " + where + " line " + std::to_string(line_no) +
                                     ": expected key = value");
        apply_config_line(c, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)),
                          where + " line " + std::to_string(line_no));
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigurationError("config file not found: '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), "'" + path + "'");
}

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
    return canonical_config_text(a) == canonical_config_text(b);
}

// ---------------------------------------------------------------------------
// Derived objects.
// ---------------------------------------------------------------------------

inline SynthSpec synth_spec_from(const ExperimentConfig& c) {
    SynthSpec spec =
        c.synth_preset == "imbalanced" ? imbalanced_synth_spec() : default_synth_spec();
    if (c.synth_preset != "balanced" && c.synth_preset != "imbalanced")
        throw ConfigurationError("config: synth.preset must be balanced or imbalanced");
    spec.n_participants = c.synth_participants;
    spec.seconds_per_class = c.synth_seconds_per_class;
    spec.fs_base = c.synth_fs_base;
    spec.noise = c.synth_noise;
    spec.amp_jitter = c.synth_amp_jitter;
    spec.freq_jitter = c.synth_freq_jitter;
    return spec;
}

inline ModelConfig model_config_from(const ExperimentConfig& c, std::vector<int> frequencies,
                                     const std::vector<SensorSpec>& sensors, int n_classes) {
    ModelConfig mc;
    mc.frequencies = std::move(frequencies);
    std::sort(mc.frequencies.begin(), mc.frequencies.end());
    mc.frequencies.erase(std::unique(mc.frequencies.begin(), mc.frequencies.end()),
                         mc.frequencies.end());
    mc.sensors = sensors;
    mc.n_classes = n_classes;
    mc.window_seconds = c.window_seconds;
    mc.head_width = c.head_width;
    mc.hp = c.hp;
    for (int fs : mc.frequencies) {
        EncoderConfig ec;
        ec.fs = fs;
        ec.temporal_channels = c.temporal_channels;
        ec.temporal_kernel = c.temporal_kernel;
        ec.spectral_channels = c.spectral_channels;
        ec.spec_cfg = c.spectrogram_for(fs);
        ec.latent_dim = c.latent_dim;
        ec.spec_fc_dim = c.spec_fc_dim;
        ec.pool_window = c.pool_window;
        ec.pool_stride = c.pool_stride;
        mc.encoders[fs] = ec;
    }
    mc.validate();
    return mc;
}

}  // namespace fedfreq
