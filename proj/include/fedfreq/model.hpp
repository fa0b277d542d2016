// Multi-frequency spectro-temporal residual network.
//
// One encoder branch exists per (sampling frequency, sensor) pair. A branch
// runs two pathways over a window's rows for that sensor: a temporal path
// (batch norm, four residual conv1d blocks, one max pool) and a spectral path
// (log-amplitude spectrogram, three conv2d blocks, dense, dropout). Their
// concatenation is projected to a fixed latent size, masked by the window's
// context bits, concatenated across sensors in a frequency-independent slot
// layout, and classified by a shared dense head.
#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "fedfreq/adam.hpp"
#include "fedfreq/dsp.hpp"
#include "fedfreq/ops.hpp"
#include "fedfreq/param_tree.hpp"
#include "fedfreq/rng.hpp"

namespace fedfreq {

struct SensorSpec {
    std::string name;
    int axes = 3;
};

struct EncoderConfig {
    int fs = 0;
    std::vector<int> temporal_channels = {16, 16, 32, 32};  // exactly 4 residual blocks
    int temporal_kernel = 3;
    std::vector<int> spectral_channels = {8, 16, 16};  // exactly 3 conv2d blocks
    SpectrogramConfig spec_cfg;
    int latent_dim = 64;
    int spec_fc_dim = 64;
    int pool_window = 2;
    int pool_stride = 2;

    void validate() const {
        if (temporal_channels.size() != 4)
            throw ConfigurationError("EncoderConfig: exactly 4 temporal residual blocks required");
        if (spectral_channels.size() != 3)
            throw ConfigurationError("EncoderConfig: exactly 3 spectral blocks required");
        if (latent_dim < 1 || spec_fc_dim < 1)
            throw ConfigurationError("EncoderConfig: latent dims must be positive");
        if (fs <= 0) throw ConfigurationError("EncoderConfig: fs must be positive");
        spec_cfg.validate();
    }
};

// Default STFT geometry per client frequency; resolution scales with fs.
inline SpectrogramConfig default_spectrogram_config(int fs) {
    SpectrogramConfig cfg;
    switch (fs) {
        case 40: cfg = {16, 8, 16, -80.0}; break;
        case 5: cfg = {8, 2, 8, -80.0}; break;
        case 3: cfg = {4, 2, 8, -80.0}; break;
        default: {
            int win = 4;
            while (win * 2 <= fs) win *= 2;  // roughly half a second of context
            win = std::min(win, 64);
            cfg = {win, std::max(1, win / 2), win, -80.0};
        }
    }
    return cfg;
}

struct ModelConfig {
    std::vector<int> frequencies;
    std::vector<SensorSpec> sensors;
    int n_classes = 7;
    double window_seconds = 2.0;
    int head_width = 128;
    HyperParams hp;
    std::map<int, EncoderConfig> encoders;  // keyed by fs

    int window_len(int fs) const { return int(std::lround(window_seconds * fs)); }

    const EncoderConfig& encoder(int fs) const {
        auto it = encoders.find(fs);
        if (it == encoders.end())
            throw FrequencyMismatchError("no encoder configured for " + std::to_string(fs) +
                                         " Hz");
        return it->second;
    }

    void validate() const {
        if (frequencies.empty()) throw ConfigurationError("ModelConfig: frequencies empty");
        if (sensors.empty()) throw ConfigurationError("ModelConfig: sensors empty");
        if (n_classes < 2) throw ConfigurationError("ModelConfig: n_classes must be >= 2");
        int latent = -1;
        for (int fs : frequencies) {
            const EncoderConfig& ec = encoder(fs);
            ec.validate();
            if (ec.fs != fs) throw ConfigurationError("ModelConfig: encoder fs mismatch");
            if (latent < 0) latent = ec.latent_dim;
            if (ec.latent_dim != latent)
                throw ConfigurationError(
                    "ModelConfig: latent_dim must be identical across encoders");
        }
        hp.validate();
    }
};

inline std::string branch_key(int fs, const std::string& sensor) {
    return "f" + std::to_string(fs) + "." + sensor;
}

inline ModelConfig default_model_config(std::vector<int> frequencies,
                                        std::vector<SensorSpec> sensors, int n_classes) {
    ModelConfig cfg;
    cfg.frequencies = std::move(frequencies);
    cfg.sensors = std::move(sensors);
    cfg.n_classes = n_classes;
    for (int fs : cfg.frequencies) {
        EncoderConfig ec;
        ec.fs = fs;
        ec.spec_cfg = default_spectrogram_config(fs);
        cfg.encoders[fs] = ec;
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Parameter layout.
// ---------------------------------------------------------------------------

enum class LeafKind { conv_weight, dense_weight, bias, bn_gamma, bn_beta, bn_stat };

struct LeafSpec {
    std::string key;
    std::vector<int> shape;
    LeafKind kind = LeafKind::bias;
    int fan_in = 0;
};

namespace detail {

inline int pooled_len(const EncoderConfig& ec, int window_len) {
    if (ec.pool_window > window_len)
        throw DimensionError("pool window exceeds temporal length");
    return (window_len - ec.pool_window) / ec.pool_stride + 1;
}

inline int spec_frames(const EncoderConfig& ec, int window_len) {
    if (window_len < ec.spec_cfg.win_len)
        throw DimensionError("window shorter than spectrogram analysis window");
    return (window_len - ec.spec_cfg.win_len) / ec.spec_cfg.hop + 1;
}

inline int spec_bins(const EncoderConfig& ec) { return ec.spec_cfg.nfft / 2 + 1; }

inline void branch_leaf_specs(const ModelConfig& cfg, int fs, const SensorSpec& sensor,
                              std::vector<LeafSpec>& out) {
    const EncoderConfig& ec = cfg.encoder(fs);
    const std::string b = branch_key(fs, sensor.name) + "/";
    const int axes = sensor.axes;
    const int k = ec.temporal_kernel;

    out.push_back({b + "t.bn.gamma", {axes}, LeafKind::bn_gamma, 0});
    out.push_back({b + "t.bn.beta", {axes}, LeafKind::bn_beta, 0});
    out.push_back({b + "t.bn.running_mean", {axes}, LeafKind::bn_stat, 0});
    out.push_back({b + "t.bn.running_var", {axes}, LeafKind::bn_stat, 0});

    int in_ch = axes;
    for (int i = 0; i < 4; ++i) {
        const int out_ch = ec.temporal_channels[size_t(i)];
        const std::string pre = b + "t.b" + std::to_string(i) + ".";
        out.push_back({pre + "c1.w", {out_ch, in_ch, k}, LeafKind::conv_weight, in_ch * k});
        out.push_back({pre + "c1.b", {out_ch}, LeafKind::bias, 0});
        out.push_back({pre + "c2.w", {out_ch, out_ch, k}, LeafKind::conv_weight, out_ch * k});
        out.push_back({pre + "c2.b", {out_ch}, LeafKind::bias, 0});
        if (in_ch != out_ch)
            out.push_back({pre + "skip.w", {out_ch, in_ch, 1}, LeafKind::conv_weight, in_ch});
        in_ch = out_ch;
    }

    int sc_in = axes;
    for (int i = 0; i < 3; ++i) {
        const int sc_out = ec.spectral_channels[size_t(i)];
        const std::string pre = b + "s.c" + std::to_string(i) + ".";
        out.push_back({pre + "w", {sc_out, sc_in, 3, 3}, LeafKind::conv_weight, sc_in * 9});
        out.push_back({pre + "b", {sc_out}, LeafKind::bias, 0});
        sc_in = sc_out;
    }

    const int wlen = cfg.window_len(fs);
    const int s_flat = ec.spectral_channels[2] * spec_bins(ec) * spec_frames(ec, wlen);
    out.push_back({b + "s.fc.w", {ec.spec_fc_dim, s_flat}, LeafKind::dense_weight, s_flat});
    out.push_back({b + "s.fc.b", {ec.spec_fc_dim}, LeafKind::bias, 0});

    const int t_flat = ec.temporal_channels[3] * pooled_len(ec, wlen);
    const int proj_in = t_flat + ec.spec_fc_dim;
    out.push_back({b + "proj.w", {ec.latent_dim, proj_in}, LeafKind::dense_weight, proj_in});
    out.push_back({b + "proj.b", {ec.latent_dim}, LeafKind::bias, 0});
}

}  // namespace detail

inline std::vector<LeafSpec> build_leaf_specs(const ModelConfig& cfg) {
    cfg.validate();
    std::vector<LeafSpec> out;
    for (int fs : cfg.frequencies)
        for (const SensorSpec& sensor : cfg.sensors)
            detail::branch_leaf_specs(cfg, fs, sensor, out);

    const int latent = cfg.encoder(cfg.frequencies[0]).latent_dim;
    const int head_in = int(cfg.sensors.size()) * latent;
    out.push_back({"head/fc0.w", {cfg.head_width, head_in}, LeafKind::dense_weight, head_in});
    out.push_back({"head/fc0.b", {cfg.head_width}, LeafKind::bias, 0});
    out.push_back(
        {"head/out.w", {cfg.n_classes, cfg.head_width}, LeafKind::dense_weight, cfg.head_width});
    out.push_back({"head/out.b", {cfg.n_classes}, LeafKind::bias, 0});
    return out;
}

inline int64_t param_count(const ModelConfig& cfg) {
    int64_t n = 0;
    for (const LeafSpec& leaf : build_leaf_specs(cfg)) n += shape_numel(leaf.shape);
    return n;
}

// He-uniform for conv/dense weights, zeros for biases, identity batch norm.
// Each leaf draws from its own key-derived stream, so shared keys initialize
// identically across model variants built from the same seed.
inline ParamTree init_params(const ModelConfig& cfg, uint64_t seed) {
    ParamTree tree;
    for (const LeafSpec& leaf : build_leaf_specs(cfg)) {
        Tensor t = Tensor::zeros(leaf.shape);
        switch (leaf.kind) {
            case LeafKind::conv_weight:
            case LeafKind::dense_weight: {
                Rng rng(mix_seed(seed, fnv1a(leaf.key)));
                const double limit = std::sqrt(6.0 / double(leaf.fan_in));
                for (double& v : t.data()) v = rng.next_uniform(-limit, limit);
                break;
            }
            case LeafKind::bn_gamma:
                for (double& v : t.data()) v = 1.0;
                break;
            case LeafKind::bn_stat:
                if (leaf.key.ends_with(".running_var"))
                    for (double& v : t.data()) v = 1.0;
                break;
            case LeafKind::bn_beta:
            case LeafKind::bias:
                break;  // zeros
        }
        tree.emplace(leaf.key, t);
    }
    return tree;
}

inline std::vector<std::string> dense_weight_keys(const ModelConfig& cfg) {
    std::vector<std::string> keys;
    for (const LeafSpec& leaf : build_leaf_specs(cfg))
        if (leaf.kind == LeafKind::dense_weight) keys.push_back(leaf.key);
    return keys;
}

// ---------------------------------------------------------------------------
// Forward pass.
// ---------------------------------------------------------------------------

namespace detail {

inline const Tensor& leaf(const ParamTree& params, const std::string& key) {
    auto it = params.find(key);
    if (it == params.end()) throw Error("missing parameter leaf '" + key + "'");
    return it->second;
}

}  // namespace detail

// Temporal pathway over [g, axes, len]: batch norm, 4 residual blocks, one
// max pool, flatten. Updated running stats are reported through `stat_out`
// in train mode.
inline Tensor temporal_path(const Tensor& x, const ParamTree& params, const std::string& branch,
                            const EncoderConfig& ec, const HyperParams& hp, Mode mode,
                            std::map<std::string, Tensor>* stat_out = nullptr) {
    const std::string b = branch + "/";
    BatchNormResult bn = batchnorm1d(x, detail::leaf(params, b + "t.bn.gamma"),
                                     detail::leaf(params, b + "t.bn.beta"),
                                     detail::leaf(params, b + "t.bn.running_mean"),
                                     detail::leaf(params, b + "t.bn.running_var"), mode);
    if (mode == Mode::train && stat_out) {
        (*stat_out)[b + "t.bn.running_mean"] = bn.running_mean;
        (*stat_out)[b + "t.bn.running_var"] = bn.running_var;
    }
    Tensor h = bn.out;
    const int pad = (ec.temporal_kernel - 1) / 2;  // same-padding
    int in_ch = x.dim(1);
    for (int i = 0; i < 4; ++i) {
        const int out_ch = ec.temporal_channels[size_t(i)];
        const std::string pre = b + "t.b" + std::to_string(i) + ".";
        Tensor y = conv1d(h, detail::leaf(params, pre + "c1.w"),
                          detail::leaf(params, pre + "c1.b"), 1, pad);
        y = leaky_relu(y, hp.leaky_slope);
        y = conv1d(y, detail::leaf(params, pre + "c2.w"), detail::leaf(params, pre + "c2.b"), 1,
                   pad);
        Tensor skip = h;
        if (in_ch != out_ch) {
            // 1x1 projection aligns channel widths on the shortcut.
            Tensor zero_bias = Tensor::zeros({out_ch});
            skip = conv1d(h, detail::leaf(params, pre + "skip.w"), zero_bias, 1, 0);
        }
        h = leaky_relu(add(y, skip), hp.leaky_slope);
        in_ch = out_ch;
    }
    h = maxpool1d(h, ec.pool_window, ec.pool_stride);
    return flatten(h);
}

// Spectral pathway: per-axis log-amplitude spectrograms stacked as channels,
// then 3 conv2d blocks, flatten, dense, dropout.
inline Tensor spectral_path(const Tensor& x, const ParamTree& params, const std::string& branch,
                            const EncoderConfig& ec, const HyperParams& hp, Mode mode,
                            Rng& rng) {
    const std::string b = branch + "/";
    const int g = x.dim(0), axes = x.dim(1), len = x.dim(2);
    const int bins = detail::spec_bins(ec);
    const int frames = detail::spec_frames(ec, len);

    // Spectrograms are functions of the input only; they enter the graph as
    // constants.
    Tensor spec = Tensor::zeros({g, axes, bins, frames});
    double* sp = spec.data().data();
    const double* xv = x.data().data();
    for (int w = 0; w < g; ++w)
        for (int a = 0; a < axes; ++a) {
            Tensor s = log_amp_spectrogram(
                std::span<const double>(xv + (int64_t(w) * axes + a) * len, size_t(len)),
                ec.spec_cfg);
            std::memcpy(sp + ((int64_t(w) * axes + a) * bins) * frames, s.data().data(),
                        size_t(s.size()) * sizeof(double));
        }

    Tensor h = spec;
    for (int i = 0; i < 3; ++i) {
        const std::string pre = b + "s.c" + std::to_string(i) + ".";
        h = conv2d(h, detail::leaf(params, pre + "w"), detail::leaf(params, pre + "b"), 1, 1);
        h = leaky_relu(h, hp.leaky_slope);
    }
    h = flatten(h);
    h = dense(h, detail::leaf(params, b + "s.fc.w"), detail::leaf(params, b + "s.fc.b"));
    return dropout(h, hp.dropout_rate, rng, mode);
}

// Encodes a batch of same-frequency windows restricted to one sensor's rows:
// x is [g, axes, len], the result [g, latent_dim].
inline Tensor encode_sensor_batch(const Tensor& x, const ParamTree& params,
                                  const std::string& branch, const EncoderConfig& ec,
                                  const HyperParams& hp, Mode mode, Rng& rng,
                                  std::map<std::string, Tensor>* stat_out = nullptr) {
    if (x.ndim() != 3) throw DimensionError("encode_sensor_batch: input must be [g, axes, len]");
    Tensor t_feat = temporal_path(x, params, branch, ec, hp, mode, stat_out);
    Tensor s_feat = spectral_path(x, params, branch, ec, hp, mode, rng);
    Tensor cat = concat_cols({t_feat, s_feat});
    const std::string b = branch + "/";
    return dense(cat, detail::leaf(params, b + "proj.w"), detail::leaf(params, b + "proj.b"));
}

// Single-window encoder ([axes, len] rows of one sensor -> [latent_dim]).
inline Tensor encode_channel(const Tensor& window_rows, const ParamTree& params,
                             const std::string& branch, const ModelConfig& cfg, int fs,
                             Mode mode, Rng& rng) {
    if (window_rows.ndim() != 2)
        throw DimensionError("encode_channel: window rows must be [axes, len]");
    const EncoderConfig& ec = cfg.encoder(fs);
    if (window_rows.dim(1) != cfg.window_len(fs))
        throw FrequencyMismatchError(
            "encode_channel: window length " + std::to_string(window_rows.dim(1)) +
            " does not match " + std::to_string(fs) + " Hz branch (expects " +
            std::to_string(cfg.window_len(fs)) + " samples)");
    Tensor batched = Tensor::zeros({1, window_rows.dim(0), window_rows.dim(1)});
    std::memcpy(batched.data().data(), window_rows.data().data(),
                size_t(window_rows.size()) * sizeof(double));
    Tensor latent = encode_sensor_batch(batched, params, branch, ec, cfg.hp, mode, rng);
    return reshape(latent, {ec.latent_dim});
}

// Per-window context masking: concatenation of latents with absent sensors
// zeroed (spec-level convenience; the batched path uses scale_rows directly).
inline Tensor apply_context(const std::vector<Tensor>& latents, const std::vector<int>& context) {
    if (latents.size() != context.size())
        throw DimensionError("apply_context: latent count differs from context length");
    std::vector<Tensor> masked;
    masked.reserve(latents.size());
    for (size_t i = 0; i < latents.size(); ++i) {
        Tensor row = latents[i];
        if (row.ndim() == 1) {
            Tensor r2 = Tensor::zeros({1, row.dim(0)});
            std::memcpy(r2.data().data(), row.data().data(),
                        size_t(row.size()) * sizeof(double));
            row = r2;
        }
        Tensor bit = Tensor::of({1}, {double(context[i])});
        masked.push_back(scale_rows(row, bit));
    }
    Tensor cat = concat_cols(masked);
    return reshape(cat, {cat.dim(1)});
}

struct ForwardResult {
    Tensor logits;  // [batch, n_classes], rows in input order
    Tensor probs;
    std::map<std::string, Tensor> stat_updates;  // train-mode running stats
    std::vector<std::string> used_branches;      // branches that saw windows
};

// Routes every window to its frequency's branches and applies the shared
// head. Windows of mixed frequencies are grouped internally; outputs are
// returned in input order.
inline ForwardResult forward_model(const std::vector<const SensorWindow*>& batch,
                                   const ParamTree& params, const ModelConfig& cfg, Mode mode,
                                   Rng& rng) {
    if (batch.empty()) throw DimensionError("forward: empty batch");
    int total_axes = 0;
    for (const SensorSpec& s : cfg.sensors) total_axes += s.axes;

    // Group windows by frequency, ascending.
    std::map<int, std::vector<int>> groups;
    for (int i = 0; i < int(batch.size()); ++i) {
        const SensorWindow& w = *batch[size_t(i)];
        if (!cfg.encoders.count(w.fs))
            throw FrequencyMismatchError("forward: window at unconfigured frequency " +
                                         std::to_string(w.fs) + " Hz");
        if (w.data.dim(0) != total_axes)
            throw DimensionError("forward: window row count does not match sensor layout");
        if (int(w.context.size()) != int(cfg.sensors.size()))
            throw DimensionError("forward: context length does not match sensor count");
        groups[w.fs].push_back(i);
    }

    ForwardResult result;
    std::vector<Tensor> group_logits;
    std::vector<int> order;  // input index of each grouped row
    for (const auto& [fs, idxs] : groups) {
        const EncoderConfig& ec = cfg.encoder(fs);
        const int g = int(idxs.size());
        const int len = cfg.window_len(fs);

        std::vector<Tensor> sensor_latents;
        int row_offset = 0;
        for (size_t si = 0; si < cfg.sensors.size(); ++si) {
            const SensorSpec& sensor = cfg.sensors[si];
            Tensor x = Tensor::zeros({g, sensor.axes, len});
            double* xv = x.data().data();
            for (int i = 0; i < g; ++i) {
                const SensorWindow& w = *batch[size_t(idxs[size_t(i)])];
                if (w.data.dim(1) != len)
                    throw FrequencyMismatchError(
                        "forward: window length does not match its frequency");
                const double* src = w.data.data().data() + int64_t(row_offset) * len;
                std::memcpy(xv + (int64_t(i) * sensor.axes) * len, src,
                            size_t(sensor.axes) * size_t(len) * sizeof(double));
            }
            const std::string bkey = branch_key(fs, sensor.name);
            Tensor latent = encode_sensor_batch(x, params, bkey, ec, cfg.hp, mode, rng,
                                                &result.stat_updates);
            result.used_branches.push_back(bkey);

            Tensor bits = Tensor::zeros({g});
            for (int i = 0; i < g; ++i)
                bits.data()[size_t(i)] = double(batch[size_t(idxs[size_t(i)])]->context[si]);
            sensor_latents.push_back(scale_rows(latent, bits));
            row_offset += sensor.axes;
        }

        Tensor fused = concat_cols(sensor_latents);
        Tensor h = dense(fused, detail::leaf(params, "head/fc0.w"),
                         detail::leaf(params, "head/fc0.b"));
        h = leaky_relu(h, cfg.hp.leaky_slope);
        h = dropout(h, cfg.hp.dropout_rate, rng, mode);
        Tensor logits =
            dense(h, detail::leaf(params, "head/out.w"), detail::leaf(params, "head/out.b"));
        group_logits.push_back(logits);
        for (int i : idxs) order.push_back(i);
    }
    result.used_branches.push_back("head");

    Tensor stacked = group_logits.size() == 1 ? group_logits[0] : concat_rows(group_logits);
    // order[j] = input index of stacked row j; invert to restore input order.
    std::vector<int> inverse(order.size());
    for (int j = 0; j < int(order.size()); ++j) inverse[size_t(order[size_t(j)])] = j;
    result.logits = permute_rows(stacked, inverse);
    result.probs = softmax(result.logits);
    return result;
}

inline std::vector<const SensorWindow*> window_ptrs(const std::vector<SensorWindow>& windows) {
    std::vector<const SensorWindow*> ptrs;
    ptrs.reserve(windows.size());
    for (const SensorWindow& w : windows) ptrs.push_back(&w);
    return ptrs;
}

// Class probabilities, one row per window (spec-facing forward).
inline Tensor forward(const std::vector<SensorWindow>& batch, const ParamTree& params,
                      const ModelConfig& cfg, Mode mode, Rng& rng) {
    return forward_model(window_ptrs(batch), params, cfg, mode, rng).probs;
}

// Eval-mode probabilities in fixed-size chunks (keeps graph memory bounded).
inline Tensor predict_probs(const std::vector<const SensorWindow*>& windows,
                            const ParamTree& params, const ModelConfig& cfg,
                            int chunk_size = 256) {
    if (windows.empty()) throw DimensionError("predict_probs: no windows");
    Tensor out = Tensor::zeros({int(windows.size()), cfg.n_classes});
    Rng rng(0);  // unused in eval mode
    for (int start = 0; start < int(windows.size()); start += chunk_size) {
        const int end = std::min<int>(start + chunk_size, int(windows.size()));
        std::vector<const SensorWindow*> chunk(windows.begin() + start, windows.begin() + end);
        ForwardResult r = forward_model(chunk, params, cfg, Mode::eval, rng);
        std::memcpy(out.data().data() + int64_t(start) * cfg.n_classes, r.probs.data().data(),
                    size_t(r.probs.size()) * sizeof(double));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training step.
// ---------------------------------------------------------------------------

inline ParamTree make_training_tree(const ParamTree& params) {
    return clone_tree(params, /*requires_grad=*/true);
}

struct StepResult {
    ParamTree params;
    double loss = 0.0;
};

// One optimizer step on a batch. `params` must come from make_training_tree
// (or a previous step); only branches the batch exercises receive gradients,
// so all other branches come back bit-identical.
inline StepResult train_step(const std::vector<const SensorWindow*>& batch,
                             const ParamTree& params, AdamState& state, const ModelConfig& cfg,
                             Rng& rng) {
    if (batch.empty()) throw DimensionError("train_step: empty batch");

    // Stale gradient buffers from the previous step must not leak in.
    for (const auto& [key, tensor] : params) tensor.node()->grad.clear();

    ForwardResult fwd = forward_model(batch, params, cfg, Mode::train, rng);

    std::vector<int> labels;
    labels.reserve(batch.size());
    for (const SensorWindow* w : batch) labels.push_back(w->label);

    // L2 covers dense-layer weights of the branches this batch actually
    // trains (plus the head); untouched branches stay frozen.
    std::vector<Tensor> l2_params;
    if (cfg.hp.l2_rate != 0.0) {
        std::set<std::string> used(fwd.used_branches.begin(), fwd.used_branches.end());
        for (const std::string& key : dense_weight_keys(cfg))
            if (used.count(branch_of(key))) l2_params.push_back(detail::leaf(params, key));
    }

    Tensor loss = cross_entropy_loss(fwd.logits, labels, cfg.hp.l2_rate, l2_params);
    backward(loss);

    GradMap grads;
    for (const auto& [key, tensor] : params)
        if (tensor.requires_grad() && tensor.has_grad())
            grads.emplace(key, std::vector<double>(tensor.grad().begin(), tensor.grad().end()));

    ParamTree next = adam_step(params, grads, state, cfg.hp);
    // Keep updated leaves trainable and fold in fresh batch-norm statistics.
    for (auto& [key, tensor] : next)
        if (is_trainable_key(key)) tensor.set_requires_grad(true);
    for (const auto& [key, tensor] : fwd.stat_updates) next[key] = tensor;

    return {std::move(next), loss.item()};
}

}  // namespace fedfreq
