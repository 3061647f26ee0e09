// transop: data synthesis, preprocessing, training, evaluation, prediction
// and gradient self-verification for the stroke-outcome transformer.
//
// Every command is deterministic given its flags and seeds. Errors print a
// single "error: ..." line on stderr and exit nonzero.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "transop/checkpoint.hpp"
#include "transop/dataset.hpp"
#include "transop/eval.hpp"
#include "transop/gradcheck_suite.hpp"
#include "transop/hash.hpp"
#include "transop/keyval.hpp"
#include "transop/model.hpp"
#include "transop/preprocess.hpp"
#include "transop/train.hpp"
#include "transop/volume.hpp"

namespace fs = std::filesystem;
using namespace transop;

namespace {

constexpr const char* kToolVersion = "0.1.0";

std::vector<int> parse_dims(const std::string& s, size_t count, const std::string& flag) {
    std::vector<int> out;
    std::istringstream in(s);
    std::string tok;
    while (std::getline(in, tok, ','))
        if (!tok.empty()) out.push_back(std::stoi(tok));
    if (out.size() != count)
        throw ConfigError(flag + " expects " + std::to_string(count) + " comma-separated values");
    return out;
}

std::vector<double> parse_doubles(const std::string& s) {
    std::vector<double> out;
    std::istringstream in(s);
    std::string tok;
    while (std::getline(in, tok, ','))
        if (!tok.empty()) out.push_back(std::stod(tok));
    return out;
}

// Run manifest: resolved config, seeds, input hashes, artifact paths.
// Artifacts inside the run directory are recorded relative to it, so two runs
// with identical seeds produce byte-identical manifests.
void write_manifest(const std::string& dir, const std::string& command, const KeyVal& config,
                    const std::vector<std::pair<std::string, uint64_t>>& seeds,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& artifacts) {
    nlohmann::json j;
    j["tool_version"] = kToolVersion;
    j["command"] = command;
    for (const auto& [name, value] : seeds) j["seeds"][name] = value;
    for (const auto& kv : config.pairs()) j["config"][kv.first] = kv.second;
    j["inputs"] = nlohmann::json::array();
    for (const std::string& p : inputs)
        j["inputs"].push_back({{"path", p}, {"fnv1a64", hex64(hash_file(p))}});
    j["artifacts"] = nlohmann::json::array();
    for (const std::string& p : artifacts) {
        std::error_code ec;
        fs::path rel = fs::relative(p, dir, ec);
        std::string shown = (!ec && !rel.empty() && rel.native().rfind("..", 0) != 0)
                                ? rel.string()
                                : p;
        j["artifacts"].push_back({{"path", shown}, {"fnv1a64", hex64(hash_file(p))}});
    }
    std::ofstream out(dir + "/manifest.json");
    if (!out) throw IoError("cannot write manifest in " + dir);
    out << j.dump(2) << "\n";
}

int cmd_synth(int n, const std::string& dims, int clinical_dim, uint64_t seed,
              const std::string& out_dir) {
    std::vector<int> d = parse_dims(dims, 3, "--dims");
    SynthOptions o;
    o.n = n;
    o.d = d[0];
    o.w = d[1];
    o.h = d[2];
    o.clinical_dim = clinical_dim;
    o.seed = seed;
    SynthDataset ds = synth_generate(o);
    DatasetSplit split = split_dataset(ds.records, seed);
    fs::create_directories(out_dir);
    write_dataset_dir(out_dir, ds, split);

    KeyVal cfg;
    cfg.set("n", std::to_string(n));
    cfg.set("dims", dims);
    cfg.set("clinical_dim", std::to_string(clinical_dim));
    std::vector<std::string> artifacts = {out_dir + "/clinical.csv", out_dir + "/split.json"};
    for (const auto& r : ds.records) artifacts.push_back(out_dir + "/" + r.patient_id + ".svl");
    write_manifest(out_dir, "synth", cfg, {{"seed", seed}}, {}, artifacts);
    std::cout << "wrote " << ds.records.size() << " cases (" << split.train.size() << "/"
              << split.val.size() << "/" << split.test.size() << " split) to " << out_dir << "\n";
    return 0;
}

int cmd_preprocess(const std::string& in_dir, const std::string& out_dir, bool skip_strip,
                   const std::string& target, const std::string& spacing) {
    std::vector<int> t = parse_dims(target, 3, "--target");
    PreprocessOptions po;
    po.crop_d = t[0];
    po.crop_w = t[1];
    po.crop_h = t[2];
    std::vector<double> sp = parse_doubles(spacing);
    if (sp.size() != 3) throw ConfigError("--spacing expects 3 comma-separated values");
    po.spacing_d = sp[0];
    po.spacing_w = sp[1];
    po.spacing_h = sp[2];
    po.skip_skull_strip = skip_strip;

    ClinicalTable table = read_clinical_csv(in_dir + "/clinical.csv");
    fs::create_directories(out_dir);
    std::vector<std::string> inputs = {in_dir + "/clinical.csv"};
    std::vector<std::string> artifacts;
    for (const auto& r : table.records) {
        std::string in_path = in_dir + "/" + r.patient_id + ".svl";
        Volume v = read_svl(in_path);
        Volume p = preprocess(v, po);
        std::string out_path = out_dir + "/" + r.patient_id + ".svl";
        write_svl(out_path, p);
        inputs.push_back(in_path);
        artifacts.push_back(out_path);
    }
    fs::copy_file(in_dir + "/clinical.csv", out_dir + "/clinical.csv",
                  fs::copy_options::overwrite_existing);
    artifacts.push_back(out_dir + "/clinical.csv");
    if (fs::exists(in_dir + "/split.json")) {
        fs::copy_file(in_dir + "/split.json", out_dir + "/split.json",
                      fs::copy_options::overwrite_existing);
        inputs.push_back(in_dir + "/split.json");
        artifacts.push_back(out_dir + "/split.json");
    }
    KeyVal cfg;
    cfg.set("target", target);
    cfg.set("spacing", spacing);
    cfg.set("skip_skull_strip", skip_strip ? "true" : "false");
    write_manifest(out_dir, "preprocess", cfg, {}, inputs, artifacts);
    std::cout << "preprocessed " << table.records.size() << " volumes to " << out_dir << "\n";
    return 0;
}

// defaults <- preset <- config file <- --set flags; every key resolved here.
KeyVal resolve_config(const std::string& config_path, const std::vector<std::string>& sets) {
    KeyVal file;
    if (!config_path.empty()) file = KeyVal::load(config_path);
    for (const std::string& s : sets) {
        size_t eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got " + s);
        file.set(s.substr(0, eq), s.substr(eq + 1));
    }
    TranSOPConfig base = TranSOPConfig::full_size();
    std::string preset = file.get_or("preset", "full");
    if (preset == "tiny") base = TranSOPConfig::tiny();
    else if (preset != "full") throw ConfigError("unknown preset '" + preset + "'");
    if (!file.has("variant")) file.get("variant"); // missing config key error
    base.variant = parse_variant(file.get("variant"));

    KeyVal resolved = base.to_kv();
    KeyVal train_defaults = TrainConfig{}.to_kv();
    for (const auto& kv : train_defaults.pairs()) resolved.set(kv.first, kv.second);
    resolved.set("preset", preset);
    for (const auto& kv : file.pairs()) {
        if (!resolved.has(kv.first) && kv.first != "variant")
            throw ConfigError("unknown config key '" + kv.first + "'");
        resolved.set(kv.first, kv.second);
    }
    // validate by round trip
    TranSOPConfig::from_kv(resolved);
    TrainConfig::from_kv(resolved);
    return resolved;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& data_dir, const std::string& out_dir) {
    KeyVal resolved = resolve_config(config_path, sets);
    TranSOPConfig mc = TranSOPConfig::from_kv(resolved);
    TrainConfig tc = TrainConfig::from_kv(resolved);

    Dataset ds = load_dataset_dir(data_dir);
    DatasetSplit split = read_split_manifest(data_dir + "/split.json");

    Rng init_rng(mix_seed({tc.seed, 0x1417ull}));
    Model model = build_model(mc, init_rng);
    Model best;
    TrainResult result = train_loop(model, ds, split, tc, &best);

    fs::create_directories(out_dir);
    std::string ckpt = out_dir + "/checkpoint.tsck";
    std::string hist = out_dir + "/history.csv";
    save_checkpoint(ckpt, best);
    write_history_csv(hist, result.history);
    resolved.save(out_dir + "/config.resolved");
    std::vector<std::string> inputs = {data_dir + "/clinical.csv", data_dir + "/split.json"};
    write_manifest(out_dir, "train", resolved, {{"seed", tc.seed}}, inputs,
                   {ckpt, hist, out_dir + "/config.resolved"});
    std::cout << "trained " << tc.epochs << " epochs; best val AUC "
              << format_metric(result.best_val_auc) << " at epoch " << result.best_epoch << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& split_name,
             const std::string& out_dir, int resamples, uint64_t boot_seed) {
    Model model = load_checkpoint(ckpt_path);
    Dataset ds = load_dataset_dir(data_dir);
    DatasetSplit split = read_split_manifest(data_dir + "/split.json");
    const std::vector<std::string>& ids = split.ids(split_name);
    if (ids.empty()) throw ConfigError("split '" + split_name + "' is empty in " + data_dir);
    auto [report, rows] = evaluate_split(model, ds, ids, resamples, boot_seed);

    fs::create_directories(out_dir);
    std::string report_path = out_dir + "/report.txt";
    std::string dump_path = out_dir + "/predictions.csv";
    write_report(report_path, report);
    write_sample_dump(dump_path, rows);
    KeyVal cfg = model.cfg.to_kv();
    cfg.set("split", split_name);
    cfg.set("resamples", std::to_string(resamples));
    write_manifest(out_dir, "eval", cfg, {{"bootstrap_seed", boot_seed}},
                   {ckpt_path, data_dir + "/clinical.csv", data_dir + "/split.json"},
                   {report_path, dump_path});
    std::cout << report_text(report);
    return 0;
}

int cmd_predict(const std::string& ckpt_path, const std::string& volume_path,
                const std::string& clinical) {
    Model model = load_checkpoint(ckpt_path);
    Volume vol;
    std::vector<double> feats;
    const Volume* vp = nullptr;
    const std::vector<double>* fp = nullptr;
    if (model.cfg.uses_image()) {
        if (volume_path.empty()) throw ConfigError("model requires --volume");
        vol = read_svl(volume_path);
        vp = &vol;
    }
    if (model.cfg.uses_clinical()) {
        if (clinical.empty()) throw ConfigError("model requires --clinical");
        feats = parse_doubles(clinical);
        fp = &feats;
    }
    Prediction p = predict_one(model, vp, fp);
    std::cout << "prob_good=" << format_metric(p.probs[0]) << " prob_bad="
              << format_metric(p.probs[1]) << " label=" << p.label << " ("
              << (p.label == 1 ? "bad outcome, mRS > 2" : "good outcome, mRS <= 2") << ")\n";
    return 0;
}

int cmd_gradcheck(const std::string& preset, uint64_t seed, int threads) {
    if (preset != "tiny") throw ConfigError("gradcheck supports only --preset tiny");
    bool corrupt = false;
    if (const char* env = std::getenv("TRANSOP_GRADCHECK_CORRUPT"))
        corrupt = std::string(env) == "1";
    if (threads <= 0) threads = default_thread_count();
    std::vector<GradCheckEntry> entries = gradcheck_suite(seed, corrupt, threads);
    bool ok = true;
    for (const auto& e : entries) {
        std::printf("%-14s max_rel_err %.3e  tol %.0e  %s\n", e.component.c_str(), e.max_rel_err,
                    e.tolerance, e.passed() ? "PASS" : "FAIL");
        ok = ok && e.passed();
    }
    if (!ok) {
        std::cerr << "error: gradient check failed\n";
        return 1;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"TranSOP stroke-outcome transformer toolkit"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "generate a synthetic multimodal dataset");
    int n = 500, clinical_dim = 10;
    std::string dims = "8,24,16", out_dir;
    uint64_t seed = 1;
    synth->add_option("--n", n, "number of cases");
    synth->add_option("--dims", dims, "volume dims D,W,H");
    synth->add_option("--clinical-dim", clinical_dim, "clinical feature count");
    synth->add_option("--seed", seed, "generator seed");
    synth->add_option("--out", out_dir, "output directory")->required();

    auto* prep = app.add_subcommand("preprocess", "run the preprocessing chain over a dataset");
    std::string p_in, p_out, p_target = "32,192,128", p_spacing = "3,1,1";
    bool skip_strip = false;
    prep->add_option("--in", p_in, "input dataset directory")->required();
    prep->add_option("--out", p_out, "output directory")->required();
    prep->add_flag("--skip-skull-strip", skip_strip, "skip the skull-stripping stage");
    prep->add_option("--target", p_target, "crop target D,W,H");
    prep->add_option("--spacing", p_spacing, "resample spacing mm sd,sw,sh");

    auto* train = app.add_subcommand("train", "train a model");
    std::string t_config, t_data, t_out;
    std::vector<std::string> t_sets;
    train->add_option("--config", t_config, "key=value config file");
    train->add_option("--set", t_sets, "override config key=value (repeatable, wins over file)");
    train->add_option("--data", t_data, "preprocessed dataset directory")->required();
    train->add_option("--out", t_out, "run output directory")->required();

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    std::string e_ckpt, e_data, e_split = "test", e_out;
    int e_resamples = 2000;
    uint64_t e_boot_seed = 0;
    eval->add_option("--checkpoint", e_ckpt, "checkpoint file")->required();
    eval->add_option("--data", e_data, "preprocessed dataset directory")->required();
    eval->add_option("--split", e_split, "train|val|test");
    eval->add_option("--out", e_out, "output directory")->required();
    eval->add_option("--resamples", e_resamples, "bootstrap resamples");
    eval->add_option("--boot-seed", e_boot_seed, "bootstrap seed");

    auto* predict = app.add_subcommand("predict", "predict one case");
    std::string pr_ckpt, pr_volume, pr_clinical;
    predict->add_option("--checkpoint", pr_ckpt, "checkpoint file")->required();
    predict->add_option("--volume", pr_volume, "preprocessed SVL1 volume");
    predict->add_option("--clinical", pr_clinical, "comma-separated clinical features");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient self-check");
    std::string g_preset = "tiny";
    uint64_t g_seed = 1;
    int g_threads = 0;
    gradcheck->add_option("--preset", g_preset, "model preset (tiny)");
    gradcheck->add_option("--seed", g_seed, "suite seed");
    gradcheck->add_option("--threads", g_threads, "worker count (default: TRANSOP_THREADS or hw)");

    try {
        app.parse(argc, argv);
        if (*synth) return cmd_synth(n, dims, clinical_dim, seed, out_dir);
        if (*prep) return cmd_preprocess(p_in, p_out, skip_strip, p_target, p_spacing);
        if (*train) return cmd_train(t_config, t_sets, t_data, t_out);
        if (*eval) return cmd_eval(e_ckpt, e_data, e_split, e_out, e_resamples, e_boot_seed);
        if (*predict) return cmd_predict(pr_ckpt, pr_volume, pr_clinical);
        if (*gradcheck) return cmd_gradcheck(g_preset, g_seed, g_threads);
        return 1;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
