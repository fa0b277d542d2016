// fedfreq command-line front end.
//
// Subcommands: gen-synth, ingest, train-central, train-fed, run-matrix,
// ablate-participants, evaluate. Exit codes: 0 success, 1 configuration
// error, 2 runtime error.
#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "fedfreq/config.hpp"
#include "fedfreq/harness.hpp"
#include "fedfreq/serialize.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fedfreq;

namespace {

struct CommonArgs {
    std::string config_path;
    std::optional<uint64_t> seed;
    std::optional<std::string> out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
    auto* opt = cmd->add_option("--config", args.config_path, "experiment config file");
    if (config_required) opt->required();
    cmd->add_option("--seed", args.seed, "override the run seed");
    cmd->add_option("--out-dir", args.out_dir, "override the output directory");
}

ExperimentConfig load_config(const CommonArgs& args) {
    ExperimentConfig cfg = load_experiment_config(args.config_path);
    if (args.seed) cfg.seed = *args.seed;
    if (args.out_dir) cfg.out_dir = *args.out_dir;
    return cfg;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec && !fs::is_directory(dir)) throw IoError("cannot create directory '" + dir + "'");
}

json metrics_json(const MetricsReport& m) {
    json j;
    j["accuracy"] = m.accuracy;
    j["macro_f1"] = m.macro_f1;
    j["ce_loss"] = m.ce_loss;
    j["precision"] = m.precision;
    j["recall"] = m.recall;
    j["n_windows"] = m.n_windows;
    return j;
}

void write_rounds_jsonl(const TrainResult& result, const std::string& path) {
    std::string text;
    for (const RoundLog& r : result.log) {
        json j;
        j["round"] = r.round;
        j["val_accuracy"] = r.val_accuracy;
        j["val_macro_f1"] = r.val_macro_f1;
        j["val_ce"] = r.val_ce;
        j["selected"] = r.selected;
        json losses = json::object();
        for (const auto& [cid, loss] : r.client_loss) losses[std::to_string(cid)] = loss;
        j["client_loss"] = losses;
        text += j.dump() + "\n";
    }
    detail::write_text_file(path, text);
}

int cmd_gen_synth(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    if (args.seed) cfg.synth_seed = *args.seed;  // seed drives the generator here
    SynthSpec spec = synth_spec_from(cfg);
    DatasetManifest manifest = synth_manifest(spec, "synth");
    auto streams = gen_synthetic(spec, cfg.synth_seed);

    ensure_dir(cfg.out_dir);
    for (const auto& p : manifest.participants)
        write_stream_csv(streams.at(p.id), manifest, (fs::path(cfg.out_dir) / p.file).string());
    write_manifest(manifest, (fs::path(cfg.out_dir) / "manifest.txt").string());

    json j;
    j["participants"] = manifest.participants.size();
    j["classes"] = manifest.classes;
    j["fs_base"] = manifest.fs_base;
    j["samples_per_participant"] = streams.begin()->second.length();
    j["out_dir"] = cfg.out_dir;
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_ingest(const CommonArgs& args, const std::string& manifest_override) {
    std::string manifest_path = manifest_override;
    if (manifest_path.empty()) {
        ExperimentConfig cfg = load_config(args);
        if (cfg.dataset != "manifest")
            throw ConfigurationError("ingest: config does not reference a manifest dataset");
        manifest_path = cfg.manifest_path;
    }
    DatasetManifest manifest = parse_manifest(manifest_path);
    auto streams = load_csv(manifest);

    json per_participant = json::object();
    std::vector<long> label_hist(manifest.classes.size(), 0);
    for (const auto& [pid, stream] : streams) {
        per_participant[std::to_string(pid)] = stream.length();
        for (int l : stream.labels) label_hist[size_t(l)] += 1;
    }
    json j;
    j["name"] = manifest.name;
    j["fs_base"] = manifest.fs_base;
    j["participants"] = streams.size();
    j["samples"] = per_participant;
    json hist = json::object();
    for (size_t i = 0; i < manifest.classes.size(); ++i)
        hist[manifest.classes[i]] = label_hist[i];
    j["label_histogram"] = hist;
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_train(const CommonArgs& args, int fold_idx, bool federated) {
    ExperimentConfig cfg = load_config(args);
    cfg.mode = federated ? "federated" : "centralized";
    DatasetBundle data = load_dataset(cfg);
    const auto ids = data.participant_ids();
    const auto assignment = assign_frequencies(ids, cfg.low_fs, cfg.high_fs, cfg.seed);
    const SplitPlan plan = make_split_plan(cfg, ids);
    if (fold_idx < 0 || fold_idx >= int(plan.folds.size()))
        throw ConfigurationError("fold index " + std::to_string(fold_idx) +
                                 " out of range for " + std::to_string(plan.folds.size()) +
                                 " folds");
    const Fold& fold = plan.folds[size_t(fold_idx)];

    WindowCache cache(data, cfg);
    cache.prebuild(ids, {cfg.low_fs, cfg.high_fs});
    const ModelConfig mc = model_config_from(cfg, {cfg.low_fs, cfg.high_fs},
                                             data.manifest.sensors,
                                             int(data.manifest.classes.size()));

    auto train_clients = detail::clients_at_native(cache, fold.train_ids, assignment);
    auto val_clients = detail::clients_at_native(cache, fold.val_ids, assignment);
    auto test_clients = detail::clients_at_native(cache, fold.test_ids, assignment);

    const uint64_t fold_seed = derive_seed(cfg.seed, "fold", uint64_t(fold_idx));
    TrainResult result =
        federated ? run_rounds(train_clients, val_clients, mc, cfg.rounds, fold_seed)
                  : centralized_train(detail::client_states(train_clients), val_clients, mc,
                                      cfg.rounds, fold_seed);
    MetricsReport test = metrics_from_counts(evaluate_clients(test_clients, result.best_params, mc));

    ensure_dir(cfg.out_dir);
    write_rounds_jsonl(result, (fs::path(cfg.out_dir) / "rounds.jsonl").string());
    save_param_tree(result.best_params, (fs::path(cfg.out_dir) / "best.bin").string());
    write_config_resolved(cfg, (fs::path(cfg.out_dir) / "config.resolved").string());

    json j = metrics_json(test);
    j["fold"] = fold_idx;
    j["best_round"] = result.best_round;
    j["checkpoint"] = param_tree_hash(result.best_params);
    j["seed"] = cfg.seed;
    j["config_hash"] = config_hash(cfg);
    detail::write_text_file((fs::path(cfg.out_dir) / "test_metrics.json").string(),
                            j.dump(2) + "\n");
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_run_matrix(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    DatasetBundle data = load_dataset(cfg);
    MatrixResult result = run_matrix(cfg, data);
    emit_matrix_report(cfg, result, cfg.out_dir);
    for (const MatrixRow& row : result.rows)
        std::cout << row.config << ": f1 " << detail::fmt_fixed(row.mean_f1, 4) << " +- "
                  << detail::fmt_fixed(row.std_f1, 4) << ", acc "
                  << detail::fmt_fixed(row.mean_acc, 4) << " +- "
                  << detail::fmt_fixed(row.std_acc, 4) << "\n";
    std::cout << "reports written to " << cfg.out_dir << "\n";
    return 0;
}

int cmd_ablate(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    DatasetBundle data = load_dataset(cfg);
    AblationResult result = run_participant_ablation(cfg, data);
    emit_ablation_report(cfg, result, cfg.out_dir);
    for (const AblationRow& row : result.rows)
        std::cout << row.mode << " n=" << row.count << ": f1 "
                  << detail::fmt_fixed(row.mean_f1, 4) << " +- "
                  << detail::fmt_fixed(row.std_f1, 4) << "\n";
    std::cout << "reports written to " << cfg.out_dir << "\n";
    return 0;
}

int cmd_evaluate(const CommonArgs& args, const std::string& checkpoint_path,
                 const std::string& data_path, int eval_fs) {
    ExperimentConfig cfg = load_config(args);
    const int fs = eval_fs > 0 ? eval_fs : cfg.high_fs;

    DatasetManifest schema;
    if (cfg.dataset == "synth") {
        schema = synth_manifest(synth_spec_from(cfg), "synth");
    } else {
        schema = parse_manifest(cfg.manifest_path);
    }
    RawStream stream = load_stream_csv(data_path, schema);
    auto windows = build_client_windows(stream, fs, cfg.window_seconds, cfg.overlap,
                                        schema.sensors);
    if (windows.empty()) throw ConfigurationError("evaluate: data stream yields no windows");

    ParamTree params = load_param_tree(checkpoint_path);
    const ModelConfig mc =
        model_config_from(cfg, {fs}, schema.sensors, int(schema.classes.size()));

    Tensor probs = predict_probs(window_ptrs(windows), params, mc);
    std::vector<int> labels;
    for (const SensorWindow& w : windows) labels.push_back(w.label);
    MetricsReport report = compute_metrics(probs, labels);

    json j = metrics_json(report);
    j["checkpoint"] = param_tree_hash(params);
    j["fs"] = fs;
    std::cout << j.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-frequency federated HAR simulator"};
    app.require_subcommand(1);

    CommonArgs gen_args, ingest_args, central_args, fed_args, matrix_args, ablate_args,
        eval_args;
    std::string ingest_manifest;
    int central_fold = 0, fed_fold = 0;
    std::string eval_checkpoint, eval_data;
    int eval_fs = 0;

    auto* gen = app.add_subcommand("gen-synth", "generate a synthetic dataset as CSV files");
    add_common(gen, gen_args);

    auto* ingest = app.add_subcommand("ingest", "validate and summarize a CSV dataset");
    add_common(ingest, ingest_args, /*config_required=*/false);
    ingest->add_option("--manifest", ingest_manifest, "manifest file (instead of --config)");

    auto* central = app.add_subcommand("train-central", "centralized training on one fold");
    add_common(central, central_args);
    central->add_option("--fold", central_fold, "fold index of the split plan");

    auto* fed = app.add_subcommand("train-fed", "federated training on one fold");
    add_common(fed, fed_args);
    fed->add_option("--fold", fed_fold, "fold index of the split plan");

    auto* matrix = app.add_subcommand("run-matrix", "frequency-configuration experiment matrix");
    add_common(matrix, matrix_args);

    auto* ablate = app.add_subcommand("ablate-participants",
                                      "training-participant-count ablation");
    add_common(ablate, ablate_args);

    auto* eval = app.add_subcommand("evaluate", "evaluate a checkpoint on a CSV stream");
    add_common(eval, eval_args);
    eval->add_option("--checkpoint", eval_checkpoint, "ParamTree checkpoint file")->required();
    eval->add_option("--data", eval_data, "CSV data file")->required();
    eval->add_option("--fs", eval_fs, "evaluation sampling frequency (default: high_fs)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_synth(gen_args);
        if (ingest->parsed()) return cmd_ingest(ingest_args, ingest_manifest);
        if (central->parsed()) return cmd_train(central_args, central_fold, false);
        if (fed->parsed()) return cmd_train(fed_args, fed_fold, true);
        if (matrix->parsed()) return cmd_run_matrix(matrix_args);
        if (ablate->parsed()) return cmd_ablate(ablate_args);
        if (eval->parsed()) return cmd_evaluate(eval_args, eval_checkpoint, eval_data, eval_fs);
    } catch (const ConfigurationError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const ParseError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
