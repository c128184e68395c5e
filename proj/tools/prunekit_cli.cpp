// prunekit: structured pruning for toy byte-level decoder transformers.
// Subcommands: init, prune, eval, compare, stats.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "prunekit/iterloop.hpp"

using namespace prunekit;
using nlohmann::json;

namespace {

struct CommonOpts {
    int n_samples = 32;
    int seq_len = 64;
    uint64_t seed = 0;
    uint64_t eval_seed = 1;
    double eval_fraction = 0.2;
    int eval_n = -1;
    int threads = 1;
};

void add_common_flags(CLI::App *cmd, CommonOpts &o) {
    cmd->add_option("--n-samples", o.n_samples, "calibration sequences per domain");
    cmd->add_option("--seq-len", o.seq_len, "token window length");
    cmd->add_option("--seed", o.seed, "calibration sampling seed");
    cmd->add_option("--eval-seed", o.eval_seed, "held-out eval sampling seed");
    cmd->add_option("--eval-frac", o.eval_fraction,
                    "eval sequences per domain as a fraction of --n-samples");
    cmd->add_option("--eval-n", o.eval_n,
                    "eval sequences per domain (overrides --eval-frac)");
    cmd->add_option("--threads", o.threads, "worker threads");
}

IterOptions to_iter_options(const CommonOpts &o) {
    IterOptions opts;
    opts.n_samples = o.n_samples;
    opts.seq_len = o.seq_len;
    opts.seed = o.seed;
    opts.eval_seed = o.eval_seed;
    opts.eval_fraction = o.eval_fraction;
    opts.eval_n = o.eval_n;
    opts.threads = o.threads;
    return opts;
}

json common_echo(const CommonOpts &o) {
    return {{"n_samples", o.n_samples},   {"seq_len", o.seq_len},
            {"seed", o.seed},             {"eval_seed", o.eval_seed},
            {"eval_frac", o.eval_fraction}, {"eval_n", o.eval_n},
            {"threads", o.threads}};
}

void require_file(const std::string &path, const std::string &what) {
    if (!std::filesystem::exists(path)) {
        throw ConfigError(what + " not found: " + path);
    }
}

void write_text(const std::string &path, const std::string &text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw InputError("cannot open " + path + " for writing");
    f << text;
    if (!f) throw InputError("failed writing " + path);
}

int cmd_init(const std::string &out_path, const ModelConfig &cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const Model m = init_model(cfg, rng);
    save_model(m, out_path);
    std::cout << "wrote " << out_path << "\n"
              << "params " << param_count(m) << " (prunable "
              << prunable_param_count(m) << ")\n"
              << "hash " << hash_hex(model_hash(m)) << "\n";
    return 0;
}

int cmd_prune(const std::string &model_path, const std::string &manifest_path,
              const std::string &out_path, const std::string &report_path,
              const std::string &trace_csv, const Schedule &schedule,
              Allocation alloc, bool adaptive, double adaptive_tol,
              const std::string &cache_dir, const CommonOpts &common) {
    require_file(model_path, "model");
    require_file(manifest_path, "manifest");
    schedule.validate();

    const Model m = load_model(model_path);
    const std::vector<DomainSpec> domains = load_manifest(manifest_path);

    IterOptions opts = to_iter_options(common);
    opts.allocation = alloc;
    opts.adaptive = adaptive;
    opts.adaptive_tol = adaptive_tol;
    opts.stats_cache_dir = cache_dir;
    opts.config_echo = common_echo(common);
    opts.config_echo["command"] = "prune";
    opts.config_echo["model"] = model_path;
    opts.config_echo["manifest"] = manifest_path;
    opts.config_echo["out"] = out_path;
    opts.config_echo["report"] = report_path;
    opts.config_echo["target_ratio"] = schedule.target_ratio;
    opts.config_echo["steps"] = schedule.steps;
    opts.config_echo["curve"] = curve_name(schedule.curve);
    opts.config_echo["allocation"] = allocation_name(alloc);
    opts.config_echo["adaptive"] = adaptive;
    opts.config_echo["stats_cache"] = cache_dir;

    PruneReport report;
    try {
        const Model pruned = iterative_prune(m, domains, schedule, opts, report);
        save_model(pruned, out_path);
        if (!report_path.empty()) write_text(report_path, report.to_json().dump(2));
        if (!trace_csv.empty()) write_text(trace_csv, report.objective_trace_csv());
        std::cout << "pruned " << model_path << " -> " << out_path << "\n"
                  << "target " << report.target_ratio << ", achieved "
                  << report.achieved_ratio << " over " << report.steps.size()
                  << " step(s)\n"
                  << "recon_error " << report.steps.back().recon_error << "\n"
                  << "original " << report.original_hash << " pruned "
                  << report.pruned_hash << "\n";
        return 0;
    } catch (const std::exception &e) {
        // flag the failure in the (partial) report, then propagate
        report.config_echo = opts.config_echo;
        report.error = e.what();
        if (!report_path.empty()) write_text(report_path, report.to_json().dump(2));
        throw;
    }
}

int cmd_eval(const std::string &original_path, const std::string &pruned_path,
             const std::string &manifest_path, const std::string &out_path,
             const CommonOpts &common) {
    require_file(original_path, "original model");
    require_file(pruned_path, "pruned model");
    require_file(manifest_path, "manifest");
    const Model original = load_model(original_path);
    const Model pruned = load_model(pruned_path);
    const std::vector<DomainSpec> domains = load_manifest(manifest_path);
    const IterOptions opts = to_iter_options(common);
    const auto batch = load_eval_batch(domains, opts);
    const double err = reconstruction_error(original, pruned, batch, opts.threads);
    std::cout << "recon_error " << err << " over " << batch.size()
              << " sequences\n";
    if (!out_path.empty()) {
        json out = {{"config", common_echo(common)},
                    {"original", {{"path", original_path},
                                  {"hash", hash_hex(model_hash(original))}}},
                    {"pruned", {{"path", pruned_path},
                                {"hash", hash_hex(model_hash(pruned))}}},
                    {"eval_sequences", batch.size()},
                    {"recon_error", err}};
        out["config"]["command"] = "eval";
        write_text(out_path, out.dump(2));
    }
    return 0;
}

std::vector<ArmSpec> default_arms(const std::vector<DomainSpec> &domains,
                                  const Schedule &schedule, Allocation alloc) {
    Schedule one_shot = schedule;
    one_shot.steps = 1;
    return {
        {"one_shot_single", one_shot, alloc, {domains[0].domain}},
        {"one_shot_mixed", one_shot, alloc, {}},
        {"iterative_mixed", schedule, alloc, {}},
    };
}

int cmd_compare(const std::string &model_path, const std::string &manifest_path,
                const std::string &out_path, const Schedule &schedule,
                Allocation alloc, int sweep_seeds, const CommonOpts &common) {
    require_file(model_path, "model");
    require_file(manifest_path, "manifest");
    schedule.validate();
    if (sweep_seeds < 1) throw ConfigError("--seeds must be >= 1");

    const Model m = load_model(model_path);
    const std::vector<DomainSpec> domains = load_manifest(manifest_path);
    const std::vector<ArmSpec> arms = default_arms(domains, schedule, alloc);

    json echo = common_echo(common);
    echo["command"] = "compare";
    echo["model"] = model_path;
    echo["manifest"] = manifest_path;
    echo["target_ratio"] = schedule.target_ratio;
    echo["steps"] = schedule.steps;
    echo["curve"] = curve_name(schedule.curve);
    echo["allocation"] = allocation_name(alloc);
    echo["seeds"] = sweep_seeds;

    json result = {{"config", echo}, {"model_hash", hash_hex(model_hash(m))}};

    if (sweep_seeds == 1) {
        IterOptions opts = to_iter_options(common);
        const json cmp = compare_arms(m, domains, arms, opts);
        result["eval"] = cmp["eval"];
        result["arms"] = cmp["arms"];
        result["deltas"] = cmp["deltas"];
        for (const auto &arm : cmp["arms"]) {
            std::cout << arm["name"].get<std::string>() << " recon_error "
                      << arm["recon_error"].get<double>() << "\n";
        }
    } else {
        json runs = json::array();
        std::vector<std::vector<double>> errors(arms.size());
        for (int i = 0; i < sweep_seeds; ++i) {
            IterOptions opts = to_iter_options(common);
            opts.seed = common.seed + uint64_t(i);
            opts.eval_seed = common.eval_seed + uint64_t(i);
            const json cmp = compare_arms(m, domains, arms, opts);
            json per_seed = {{"seed", opts.seed}, {"eval_seed", opts.eval_seed}};
            json errs;
            for (size_t a = 0; a < arms.size(); ++a) {
                const double e = cmp["arms"][a]["recon_error"].get<double>();
                errs[arms[a].name] = e;
                errors[a].push_back(e);
            }
            per_seed["errors"] = errs;
            runs.push_back(per_seed);
        }
        result["runs"] = runs;
        json medians, win_rates;
        auto median = [](std::vector<double> v) {
            std::sort(v.begin(), v.end());
            const size_t n = v.size();
            return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
        };
        for (size_t a = 0; a < arms.size(); ++a) {
            medians[arms[a].name] = median(errors[a]);
        }
        for (size_t a = 0; a < arms.size(); ++a) {
            for (size_t b = 0; b < arms.size(); ++b) {
                if (a == b) continue;
                int wins = 0;
                for (int i = 0; i < sweep_seeds; ++i) {
                    if (errors[a][size_t(i)] <= errors[b][size_t(i)]) ++wins;
                }
                win_rates[arms[a].name + "<=" + arms[b].name] =
                    double(wins) / double(sweep_seeds);
            }
        }
        result["medians"] = medians;
        result["win_rate"] = win_rates;
        for (size_t a = 0; a < arms.size(); ++a) {
            std::cout << arms[a].name << " median recon_error "
                      << medians[arms[a].name].get<double>() << "\n";
        }
        std::cout << "win-rate iterative_mixed<=one_shot_mixed "
                  << win_rates["iterative_mixed<=one_shot_mixed"].get<double>()
                  << " over " << sweep_seeds << " seeds\n";
    }
    if (!out_path.empty()) write_text(out_path, result.dump(2));
    return 0;
}

int cmd_stats(const std::string &model_path, const std::string &manifest_path,
              const std::string &out_path, const CommonOpts &common) {
    require_file(model_path, "model");
    require_file(manifest_path, "manifest");
    const Model m = load_model(model_path);
    const std::vector<DomainSpec> domains = load_manifest(manifest_path);
    CollectOptions copts;
    copts.seq_len = common.seq_len;
    copts.n_samples = common.n_samples;
    copts.seed = common.seed;
    copts.threads = common.threads;
    const DomainStats ds = collect_domain_stats(m, domains, copts);
    const MixedStats mixed = mix_stats(ds, normalized_alphas(domains));

    std::string csv = "block,site,unit,score\n";
    for (const PruneSite site : prune_sites(m)) {
        const FluctuationScores sc = score(mixed, m, site);
        for (size_t u = 0; u < sc.per_unit.size(); ++u) {
            csv += std::to_string(site.block) + "," + site_kind_name(site.kind) +
                   "," + std::to_string(u) + "," +
                   std::to_string(sc.per_unit[u]) + "\n";
        }
    }
    write_text(out_path, csv);
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"structured pruning toolkit for toy decoder transformers"};
    app.require_subcommand(1);
    app.set_config("--config", "", "TOML config file; flags win over file values");
    if (const char *env = std::getenv("PRUNEKIT_CONFIG")) {
        app.get_config_ptr()->default_str(env);
    }

    // init
    auto *init = app.add_subcommand("init", "create a fresh model file");
    std::string init_out = "model.pkit";
    ModelConfig cfg;
    uint64_t init_seed = 0;
    init->add_option("--out", init_out, "output model path");
    init->add_option("--vocab", cfg.vocab, "vocabulary size");
    init->add_option("--d-model", cfg.d_model, "embedding width");
    init->add_option("--blocks", cfg.n_blocks, "decoder blocks");
    init->add_option("--heads", cfg.n_heads, "attention heads");
    init->add_option("--head-dim", cfg.head_dim, "channels per head");
    init->add_option("--d-mlp", cfg.d_mlp, "MLP intermediate channels");
    init->add_option("--max-seq", cfg.max_seq, "maximum sequence length");
    init->add_option("--seed", init_seed, "init seed");

    // prune
    auto *prune = app.add_subcommand("prune", "calibrate, score and prune");
    std::string pr_model, pr_manifest, pr_out = "pruned.pkit",
                           pr_report = "report.json", pr_trace, pr_cache;
    Schedule pr_schedule;
    std::string pr_curve = "linear", pr_alloc = "uniform";
    bool pr_adaptive = false;
    double pr_adaptive_tol = 0.01;
    CommonOpts pr_common;
    prune->add_option("--model", pr_model, "input model")->required();
    prune->add_option("--manifest", pr_manifest, "mixture manifest")->required();
    prune->add_option("--out", pr_out, "pruned model path");
    prune->add_option("--report", pr_report, "report JSON path");
    prune->add_option("--trace-csv", pr_trace, "objective trace CSV path");
    prune->add_option("--ratio", pr_schedule.target_ratio, "target pruning ratio");
    prune->add_option("--steps", pr_schedule.steps, "iterative steps");
    prune->add_option("--curve", pr_curve, "linear|geometric");
    prune->add_option("--alloc", pr_alloc, "uniform|global");
    prune->add_flag("--adaptive", pr_adaptive, "stop after trailing no-op steps converge");
    prune->add_option("--adaptive-tol", pr_adaptive_tol, "convergence tolerance");
    prune->add_option("--stats-cache", pr_cache, "stats cache directory");
    add_common_flags(prune, pr_common);

    // eval
    auto *eval = app.add_subcommand("eval", "reconstruction error on held-out data");
    std::string ev_original, ev_pruned, ev_manifest, ev_out;
    CommonOpts ev_common;
    eval->add_option("--original", ev_original, "original model")->required();
    eval->add_option("--pruned", ev_pruned, "pruned model")->required();
    eval->add_option("--manifest", ev_manifest, "mixture manifest")->required();
    eval->add_option("--out", ev_out, "error report JSON path");
    add_common_flags(eval, ev_common);

    // compare
    auto *compare = app.add_subcommand(
        "compare", "one-shot single-domain vs one-shot mixed vs iterative mixed");
    std::string cp_model, cp_manifest, cp_out = "compare.json";
    Schedule cp_schedule;
    std::string cp_curve = "linear", cp_alloc = "uniform";
    int cp_seeds = 1;
    CommonOpts cp_common;
    compare->add_option("--model", cp_model, "input model")->required();
    compare->add_option("--manifest", cp_manifest, "mixture manifest")->required();
    compare->add_option("--out", cp_out, "comparison JSON path");
    compare->add_option("--ratio", cp_schedule.target_ratio, "target pruning ratio");
    compare->add_option("--steps", cp_schedule.steps, "steps for the iterative arm");
    compare->add_option("--curve", cp_curve, "linear|geometric");
    compare->add_option("--alloc", cp_alloc, "uniform|global");
    compare->add_option("--seeds", cp_seeds, "seed sweep size");
    add_common_flags(compare, cp_common);

    // stats
    auto *stats = app.add_subcommand("stats", "dump per-site fluctuation scores");
    std::string st_model, st_manifest, st_out = "scores.csv";
    CommonOpts st_common;
    stats->add_option("--model", st_model, "input model")->required();
    stats->add_option("--manifest", st_manifest, "mixture manifest")->required();
    stats->add_option("--out", st_out, "scores CSV path");
    add_common_flags(stats, st_common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*init) return cmd_init(init_out, cfg, init_seed);
        if (*prune) {
            pr_schedule.curve = curve_from_name(pr_curve);
            return cmd_prune(pr_model, pr_manifest, pr_out, pr_report, pr_trace,
                             pr_schedule, allocation_from_name(pr_alloc),
                             pr_adaptive, pr_adaptive_tol, pr_cache, pr_common);
        }
        if (*eval) return cmd_eval(ev_original, ev_pruned, ev_manifest, ev_out, ev_common);
        if (*compare) {
            cp_schedule.curve = curve_from_name(cp_curve);
            return cmd_compare(cp_model, cp_manifest, cp_out, cp_schedule,
                               allocation_from_name(cp_alloc), cp_seeds, cp_common);
        }
        if (*stats) return cmd_stats(st_model, st_manifest, st_out, st_common);
    } catch (const ConfigError &e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
