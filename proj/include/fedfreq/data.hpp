// Dataset plumbing: manifest + CSV ingestion, the synthetic multi-frequency
// HAR generator, person-independent split protocols, and per-client window
// construction.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedfreq/dsp.hpp"
#include "fedfreq/model.hpp"
#include "fedfreq/rng.hpp"

namespace fedfreq {

// ---------------------------------------------------------------------------
// Manifest.
// ---------------------------------------------------------------------------

struct ParticipantEntry {
    int id = 0;
    std::string file;  // CSV path, relative to the manifest directory
};

struct DatasetManifest {
    std::string name;
    std::vector<SensorSpec> sensors;
    int fs_base = 0;
    std::vector<std::string> classes;
    std::vector<ParticipantEntry> participants;
    std::string dir;  // directory the manifest was loaded from

    void validate() const {
        if (classes.empty()) throw ConfigurationError("manifest: class list is empty");
        if (sensors.empty()) throw ConfigurationError("manifest: sensor list is empty");
        if (fs_base <= 0) throw ConfigurationError("manifest: fs_base must be positive");
        std::set<int> ids;
        for (const auto& p : participants)
            if (!ids.insert(p.id).second)
                throw ConfigurationError("manifest: duplicate participant id " +
                                         std::to_string(p.id));
    }

    int label_id(const std::string& label) const {
        for (size_t i = 0; i < classes.size(); ++i)
            if (classes[i] == label) return int(i);
        return -1;
    }

    int total_axes() const {
        int n = 0;
        for (const auto& s : sensors) n += s.axes;
        return n;
    }

    std::vector<int> sensor_axes() const {
        std::vector<int> out;
        for (const auto& s : sensors) out.push_back(s.axes);
        return out;
    }
};

namespace detail {

inline std::string trim(std::string_view s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(trim(item));
    if (!out.empty() && out.back().empty()) out.pop_back();
    return out;
}

inline const char* axis_letter(int i) {
    static const char* names[] = {"x", "y", "z", "w"};
    return i < 4 ? names[i] : nullptr;
}

inline std::string axis_name(const SensorSpec& sensor, int axis) {
    if (sensor.axes <= 4) return sensor.name + "_" + axis_letter(axis);
    return sensor.name + "_" + std::to_string(axis);
}

}  // namespace detail

inline DatasetManifest parse_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest '" + path + "'");
    DatasetManifest m;
    m.dir = std::filesystem::path(path).parent_path().string();
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string text = detail::trim(line);
        if (text.empty() || text[0] == '#') continue;
        const size_t eq = text.find('=');
        if (eq == std::string::npos)
            throw ParseError("manifest '" + path + "' line " + std::to_string(line_no) +
                             ": expected key = value");
        const std::string key = detail::trim(text.substr(0, eq));
        const std::string value = detail::trim(text.substr(eq + 1));
        if (key == "name") {
            m.name = value;
        } else if (key == "fs_base") {
            m.fs_base = std::stoi(value);
        } else if (key == "sensors") {
            for (const std::string& item : detail::split_list(value)) {
                const size_t colon = item.find(':');
                if (colon == std::string::npos)
                    throw ParseError("manifest line " + std::to_string(line_no) +
                                     ": sensor entry must be name:axes, got '" + item + "'");
                m.sensors.push_back(
                    {detail::trim(item.substr(0, colon)), std::stoi(item.substr(colon + 1))});
            }
        } else if (key == "classes") {
            m.classes = detail::split_list(value);
        } else if (key == "participant") {
            const auto parts = detail::split_list(value);
            if (parts.size() != 2)
                throw ParseError("manifest line " + std::to_string(line_no) +
                                 ": participant entry must be id, file");
            m.participants.push_back({std::stoi(parts[0]), parts[1]});
        } else {
            throw ParseError("manifest line " + std::to_string(line_no) + ": unknown key '" +
                             key + "'");
        }
    }
    m.validate();
    return m;
}

inline void write_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest '" + path + "'");
    out << "name = " << m.name << "\n";
    out << "fs_base = " << m.fs_base << "\n";
    out << "sensors = ";
    for (size_t i = 0; i < m.sensors.size(); ++i)
        out << (i ? ", " : "") << m.sensors[i].name << ":" << m.sensors[i].axes;
    out << "\nclasses = ";
    for (size_t i = 0; i < m.classes.size(); ++i) out << (i ? ", " : "") << m.classes[i];
    out << "\n";
    for (const auto& p : m.participants)
        out << "participant = " << p.id << ", " << p.file << "\n";
    if (!out) throw IoError("short write to manifest '" + path + "'");
}

// ---------------------------------------------------------------------------
// CSV ingestion and export.
// ---------------------------------------------------------------------------

inline std::string expected_csv_header(const DatasetManifest& m) {
    std::string h = "t";
    for (const auto& sensor : m.sensors)
        for (int a = 0; a < sensor.axes; ++a) h += "," + detail::axis_name(sensor, a);
    return h + ",label";
}

// Reads one participant CSV. Columns: t, one per sensor axis, label string.
inline RawStream load_stream_csv(const std::string& path, const DatasetManifest& m) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open data file '" + path + "'");
    std::string line;
    if (!std::getline(in, line))
        throw IngestionError("'" + path + "': empty file, expected header");
    if (detail::trim(line) != expected_csv_header(m))
        throw IngestionError("'" + path + "' row 1: header mismatch, expected '" +
                             expected_csv_header(m) + "'");
    const int axes = m.total_axes();

    RawStream stream;
    stream.fs = m.fs_base;
    stream.channels.assign(size_t(axes), {});
    double prev_t = -1.0;
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        const std::string text = detail::trim(line);
        if (text.empty()) continue;
        const auto cells = detail::split_list(text);
        if (int(cells.size()) != axes + 2)
            throw IngestionError("'" + path + "' row " + std::to_string(row) + ": expected " +
                                 std::to_string(axes + 2) + " columns, got " +
                                 std::to_string(cells.size()));
        double t;
        try {
            t = std::stod(cells[0]);
        } catch (const std::exception&) {
            throw IngestionError("'" + path + "' row " + std::to_string(row) +
                                 ": bad timestamp '" + cells[0] + "'");
        }
        if (t <= prev_t)
            throw IngestionError("'" + path + "' row " + std::to_string(row) +
                                 ": non-monotonic timestamp " + cells[0]);
        prev_t = t;
        for (int a = 0; a < axes; ++a) {
            try {
                stream.channels[size_t(a)].push_back(std::stod(cells[size_t(a + 1)]));
            } catch (const std::exception&) {
                throw IngestionError("'" + path + "' row " + std::to_string(row) +
                                     ": bad value '" + cells[size_t(a + 1)] + "'");
            }
        }
        const int label = m.label_id(cells[size_t(axes + 1)]);
        if (label < 0)
            throw IngestionError("'" + path + "' row " + std::to_string(row) +
                                 ": unknown label '" + cells[size_t(axes + 1)] + "'");
        stream.labels.push_back(label);
    }
    stream.validate();
    return stream;
}

inline std::map<int, RawStream> load_csv(const DatasetManifest& m) {
    m.validate();
    std::map<int, RawStream> out;
    for (const auto& p : m.participants) {
        std::filesystem::path file(p.file);
        if (file.is_relative() && !m.dir.empty()) file = std::filesystem::path(m.dir) / file;
        out.emplace(p.id, load_stream_csv(file.string(), m));
    }
    return out;
}

inline void write_stream_csv(const RawStream& stream, const DatasetManifest& m,
                             const std::string& path) {
    stream.validate();
    if (int(stream.channels.size()) != m.total_axes())
        throw DimensionError("write_stream_csv: channel count does not match manifest");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write data file '" + path + "'");
    out << expected_csv_header(m) << "\n";
    char buf[64];
    for (size_t i = 0; i < stream.length(); ++i) {
        std::snprintf(buf, sizeof buf, "%.6f", double(i) / double(stream.fs));
        out << buf;
        for (const auto& ch : stream.channels) {
            std::snprintf(buf, sizeof buf, ",%.6f", ch[i]);
            out << buf;
        }
        out << "," << m.classes.at(size_t(stream.labels[i])) << "\n";
    }
    if (!out) throw IoError("short write to data file '" + path + "'");
}

// ---------------------------------------------------------------------------
// Synthetic generator.
// ---------------------------------------------------------------------------

struct ClassRecipe {
    std::string name;
    std::vector<std::pair<double, double>> components;  // (frequency Hz, amplitude)
    double duration_weight = 1.0;

    double dominant_freq() const {
        double best_f = 0.0, best_a = -1.0;
        for (const auto& [f, a] : components)
            if (a > best_a) {
                best_a = a;
                best_f = f;
            }
        return best_f;
    }
};

struct SynthSpec {
    int n_participants = 14;
    std::vector<ClassRecipe> classes;
    int fs_base = 120;
    double seconds_per_class = 24.0;
    double noise = 0.4;
    double amp_jitter = 0.3;   // relative, uniform in [1-j, 1+j] per participant
    double freq_jitter = 0.05; // relative, uniform in [1-j, 1+j] per participant
    std::vector<SensorSpec> sensors = {{"acc", 3}, {"gyr", 3}};

    void validate() const {
        if (n_participants < 1) throw ConfigurationError("synth: need at least 1 participant");
        if (classes.size() < 2) throw ConfigurationError("synth: need at least 2 classes");
        if (fs_base <= 0) throw ConfigurationError("synth: fs_base must be positive");
        if (seconds_per_class <= 0)
            throw ConfigurationError("synth: seconds_per_class must be positive");
        for (size_t i = 0; i < classes.size(); ++i)
            for (size_t j = i + 1; j < classes.size(); ++j)
                if (classes[i].dominant_freq() == classes[j].dominant_freq())
                    throw ConfigurationError("synth: classes '" + classes[i].name + "' and '" +
                                             classes[j].name +
                                             "' share a dominant frequency");
    }
};

// Seven activity recipes. Three classes sit below the 2.5 Hz Nyquist of a
// 5 Hz client; the other four have their dominant tone above it, so decimation
// to 5 Hz removes the feature that separates them best. The weak secondary
// tones keep the low-rate problem solvable but harder.
inline std::vector<ClassRecipe> default_class_recipes() {
    return {
        {"staying", {{0.5, 1.0}}, 1.0},
        {"nodding", {{1.2, 1.0}}, 1.0},
        {"speaking", {{1.9, 1.0}}, 1.0},
        {"eating", {{3.3, 1.0}, {0.7, 0.3}}, 1.0},
        {"head_shake", {{4.6, 1.0}, {1.5, 0.3}}, 1.0},
        {"walking", {{6.2, 1.0}, {0.9, 0.3}}, 1.0},
        {"speak_walk", {{8.0, 1.0}, {1.7, 0.3}}, 1.0},
    };
}

inline SynthSpec default_synth_spec() {
    SynthSpec spec;
    spec.classes = default_class_recipes();
    return spec;
}

// Class-duration weights patterned after a strongly imbalanced wearables
// collection (sitting-heavy), for robustness experiments.
inline SynthSpec imbalanced_synth_spec() {
    SynthSpec spec;
    spec.classes = default_class_recipes();
    const double weights[] = {0.393, 0.273, 0.183, 0.091, 0.022, 0.017, 0.017};
    for (size_t i = 0; i < spec.classes.size(); ++i)
        spec.classes[i].duration_weight = weights[i] * 7.0;  // mean weight stays 1
    return spec;
}

// Deterministic per seed: every draw flows from streams derived from
// (seed, participant). Class blocks are laid out contiguously in class order.
inline std::map<int, RawStream> gen_synthetic(const SynthSpec& spec, uint64_t seed) {
    spec.validate();
    int axes = 0;
    for (const auto& s : spec.sensors) axes += s.axes;

    std::map<int, RawStream> out;
    for (int p = 0; p < spec.n_participants; ++p) {
        Rng rng(derive_seed(seed, "synth-participant", uint64_t(p)));
        RawStream stream;
        stream.fs = spec.fs_base;
        stream.channels.assign(size_t(axes), {});

        // Participant-level jitter: one amplitude/frequency/phase triple per
        // (class, channel, component). Drawn up front in a fixed order.
        struct Jitter {
            double amp, freq, phase;
        };
        std::vector<std::vector<std::vector<Jitter>>> jit(spec.classes.size());
        for (size_t c = 0; c < spec.classes.size(); ++c) {
            jit[c].resize(size_t(axes));
            for (int a = 0; a < axes; ++a)
                for (size_t k = 0; k < spec.classes[c].components.size(); ++k)
                    jit[c][size_t(a)].push_back(
                        {rng.next_uniform(1.0 - spec.amp_jitter, 1.0 + spec.amp_jitter),
                         rng.next_uniform(1.0 - spec.freq_jitter, 1.0 + spec.freq_jitter),
                         rng.next_uniform(0.0, 2.0 * M_PI)});
        }

        for (size_t c = 0; c < spec.classes.size(); ++c) {
            const ClassRecipe& recipe = spec.classes[c];
            const int n = int(std::lround(spec.seconds_per_class * recipe.duration_weight *
                                          double(spec.fs_base)));
            const size_t base = stream.labels.size();
            stream.labels.insert(stream.labels.end(), size_t(n), int(c));
            for (int a = 0; a < axes; ++a)
                stream.channels[size_t(a)].resize(base + size_t(n), 0.0);
            for (int i = 0; i < n; ++i) {
                const double t = double(i) / double(spec.fs_base);
                for (int a = 0; a < axes; ++a) {
                    double v = 0.0;
                    for (size_t k = 0; k < recipe.components.size(); ++k) {
                        const auto& [f, amp] = recipe.components[k];
                        const Jitter& j = jit[c][size_t(a)][k];
                        v += amp * j.amp * std::sin(2.0 * M_PI * f * j.freq * t + j.phase);
                    }
                    v += spec.noise * rng.next_normal();
                    stream.channels[size_t(a)][base + size_t(i)] = v;
                }
            }
        }
        out.emplace(p, std::move(stream));
    }
    return out;
}

inline DatasetManifest synth_manifest(const SynthSpec& spec, const std::string& name) {
    DatasetManifest m;
    m.name = name;
    m.sensors = spec.sensors;
    m.fs_base = spec.fs_base;
    for (const auto& c : spec.classes) m.classes.push_back(c.name);
    for (int p = 0; p < spec.n_participants; ++p) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "p%03d.csv", p);
        m.participants.push_back({p, buf});
    }
    return m;
}

// ---------------------------------------------------------------------------
// Frequency assignment and split protocols.
// ---------------------------------------------------------------------------

// Seeded half/half split between the two rates; an odd participant count
// sends the extra client to the high rate.
inline std::map<int, int> assign_frequencies(const std::vector<int>& participants, int low_fs,
                                             int high_fs, uint64_t seed) {
    std::vector<int> ids = participants;
    std::sort(ids.begin(), ids.end());
    Rng rng(derive_seed(seed, "assign-fs"));
    rng.shuffle(ids);
    const size_t n_low = ids.size() / 2;
    std::map<int, int> out;
    for (size_t i = 0; i < ids.size(); ++i)
        out[ids[i]] = i < n_low ? low_fs : high_fs;
    return out;
}

struct Fold {
    std::vector<int> train_ids;
    std::vector<int> val_ids;
    std::vector<int> test_ids;
};

struct SplitPlan {
    std::vector<Fold> folds;
    std::string protocol;  // "kfold" | "monte_carlo"
    uint64_t seed = 0;

    void validate() const {
        for (const Fold& f : folds) {
            std::set<int> seen;
            for (const auto* ids : {&f.train_ids, &f.val_ids, &f.test_ids})
                for (int id : *ids)
                    if (!seen.insert(id).second)
                        throw ConfigurationError(
                            "split: participant " + std::to_string(id) +
                            " appears in more than one of train/val/test");
        }
    }
};

// k folds of held-out participant groups; each group is split evenly into
// validation and test (odd group: extra participant to test).
inline SplitPlan make_kfold(const std::vector<int>& participants, int k, uint64_t seed) {
    if (k < 2) throw ConfigurationError("kfold: k must be >= 2");
    if (int(participants.size()) < 2 * k)
        throw ConfigurationError("kfold: need at least 2k participants, got " +
                                 std::to_string(participants.size()));
    std::vector<int> ids = participants;
    std::sort(ids.begin(), ids.end());
    Rng rng(derive_seed(seed, "kfold"));
    rng.shuffle(ids);

    // Contiguous groups whose sizes differ by at most one.
    std::vector<std::vector<int>> groups(size_t(k));
    const int n = int(ids.size());
    int at = 0;
    for (int g = 0; g < k; ++g) {
        const int size = n / k + (g < n % k ? 1 : 0);
        groups[size_t(g)].assign(ids.begin() + at, ids.begin() + at + size);
        at += size;
    }

    SplitPlan plan;
    plan.protocol = "kfold";
    plan.seed = seed;
    for (int g = 0; g < k; ++g) {
        Fold fold;
        const auto& held = groups[size_t(g)];
        const size_t n_val = held.size() / 2;
        fold.val_ids.assign(held.begin(), held.begin() + long(n_val));
        fold.test_ids.assign(held.begin() + long(n_val), held.end());
        for (int other = 0; other < k; ++other)
            if (other != g)
                fold.train_ids.insert(fold.train_ids.end(), groups[size_t(other)].begin(),
                                      groups[size_t(other)].end());
        std::sort(fold.train_ids.begin(), fold.train_ids.end());
        std::sort(fold.val_ids.begin(), fold.val_ids.end());
        std::sort(fold.test_ids.begin(), fold.test_ids.end());
        plan.folds.push_back(std::move(fold));
    }
    plan.validate();
    return plan;
}

// Repeated seeded resampling by participant. The rounded train count follows
// round(n * train_frac); the remainder splits evenly with the extra
// participant going to test.
inline SplitPlan make_monte_carlo(const std::vector<int>& participants, int folds,
                                  double train_frac, uint64_t seed) {
    if (folds < 1) throw ConfigurationError("monte_carlo: folds must be >= 1");
    const int n = int(participants.size());
    const int n_train = int(std::floor(double(n) * train_frac + 0.5));
    if (n_train < 1 || n_train >= n)
        throw ConfigurationError("monte_carlo: train_frac " + std::to_string(train_frac) +
                                 " leaves no participants for train or eval");
    const int rem = n - n_train;
    const int n_val = rem / 2;

    SplitPlan plan;
    plan.protocol = "monte_carlo";
    plan.seed = seed;
    for (int f = 0; f < folds; ++f) {
        std::vector<int> ids = participants;
        std::sort(ids.begin(), ids.end());
        Rng rng(derive_seed(seed, "monte-carlo", uint64_t(f)));
        rng.shuffle(ids);
        Fold fold;
        fold.train_ids.assign(ids.begin(), ids.begin() + n_train);
        fold.val_ids.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
        fold.test_ids.assign(ids.begin() + n_train + n_val, ids.end());
        std::sort(fold.train_ids.begin(), fold.train_ids.end());
        std::sort(fold.val_ids.begin(), fold.val_ids.end());
        std::sort(fold.test_ids.begin(), fold.test_ids.end());
        plan.folds.push_back(std::move(fold));
    }
    plan.validate();
    return plan;
}

// ---------------------------------------------------------------------------
// Window construction.
// ---------------------------------------------------------------------------

// Decimates a base-rate stream to `target_fs`, windows it, zero-fills sensors
// outside `sensor_subset` and clears their context bits.
inline std::vector<SensorWindow> build_client_windows(const RawStream& stream, int target_fs,
                                                      double window_seconds, double overlap,
                                                      const std::vector<SensorSpec>& sensors,
                                                      const std::set<std::string>& sensor_subset) {
    stream.validate();
    if (stream.fs % target_fs != 0)
        throw UnsupportedRatioError("build_client_windows: stream rate " +
                                    std::to_string(stream.fs) + " Hz is not a multiple of " +
                                    std::to_string(target_fs) + " Hz");
    const int ratio = stream.fs / target_fs;

    RawStream decimated;
    decimated.fs = target_fs;
    decimated.channels.reserve(stream.channels.size());
    for (const auto& ch : stream.channels)
        decimated.channels.push_back(downsample(ch, stream.fs, target_fs));
    for (size_t i = 0; i < stream.labels.size(); i += size_t(ratio))
        decimated.labels.push_back(stream.labels[i]);

    std::vector<int> axes;
    for (const auto& s : sensors) axes.push_back(s.axes);
    std::vector<SensorWindow> windows =
        window_stream(decimated, window_seconds, overlap, axes);

    // Apply the sensor subset.
    bool all_present = true;
    for (const auto& s : sensors)
        if (!sensor_subset.count(s.name)) all_present = false;
    if (all_present) return windows;

    for (SensorWindow& w : windows) {
        int row = 0;
        const int len = w.data.dim(1);
        for (size_t si = 0; si < sensors.size(); ++si) {
            const int n_axes = sensors[si].axes;
            if (!sensor_subset.count(sensors[si].name)) {
                w.context[si] = 0;
                double* d = w.data.data().data() + int64_t(row) * len;
                std::fill(d, d + int64_t(n_axes) * len, 0.0);
            }
            row += n_axes;
        }
    }
    return windows;
}

inline std::vector<SensorWindow> build_client_windows(const RawStream& stream, int target_fs,
                                                      double window_seconds, double overlap,
                                                      const std::vector<SensorSpec>& sensors) {
    std::set<std::string> all;
    for (const auto& s : sensors) all.insert(s.name);
    return build_client_windows(stream, target_fs, window_seconds, overlap, sensors, all);
}

}  // namespace fedfreq
