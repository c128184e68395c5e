#include "prunekit/iterloop.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <thread>

namespace prunekit {

using nlohmann::json;

Curve curve_from_name(const std::string &name) {
    if (name == "linear") return Curve::Linear;
    if (name == "geometric") return Curve::Geometric;
    throw ConfigError("unknown curve '" + name + "' (linear|geometric)");
}

Allocation allocation_from_name(const std::string &name) {
    if (name == "uniform") return Allocation::Uniform;
    if (name == "global") return Allocation::Global;
    throw ConfigError("unknown allocation '" + name + "' (uniform|global)");
}

std::string curve_name(Curve c) {
    return c == Curve::Linear ? "linear" : "geometric";
}

std::string allocation_name(Allocation a) {
    return a == Allocation::Uniform ? "uniform" : "global";
}

void Schedule::validate() const {
    if (!(target_ratio > 0.0 && target_ratio < 1.0)) {
        throw ConfigError("target_ratio must lie in (0,1), got " +
                          std::to_string(target_ratio));
    }
    if (steps < 1) {
        throw ConfigError("schedule needs at least one step, got " +
                          std::to_string(steps));
    }
}

std::vector<double> Schedule::cumulative_ratios() const {
    validate();
    std::vector<double> out(static_cast<size_t>(steps));
    for (int s = 1; s <= steps; ++s) {
        if (curve == Curve::Linear) {
            out[size_t(s - 1)] = target_ratio * double(s) / double(steps);
        } else {
            // equal multiplicative survival per step
            out[size_t(s - 1)] =
                1.0 - std::pow(1.0 - target_ratio, double(s) / double(steps));
        }
    }
    out.back() = target_ratio; // exact endpoint regardless of rounding
    return out;
}

int IterOptions::resolved_eval_n() const {
    if (eval_n >= 0) return eval_n;
    return std::max(1, int(std::lround(eval_fraction * double(n_samples))));
}

bool converged(const std::vector<double> &objective_trace, double tol) {
    if (objective_trace.size() < 2) return false;
    const double prev = objective_trace[objective_trace.size() - 2];
    const double cur = objective_trace.back();
    return std::abs(cur - prev) / std::max(prev, 1e-12) < tol;
}

namespace {

void parallel_for(int n, int threads, const std::function<void(int)> &fn) {
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    auto worker = [&] {
        for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    };
    std::vector<std::thread> pool;
    const int nw = std::min(threads, n);
    pool.reserve(size_t(nw));
    for (int w = 0; w < nw; ++w) pool.emplace_back(worker);
    for (auto &t : pool) t.join();
}

} // namespace

double reconstruction_error(const Model &original, const Model &pruned,
                            const std::vector<std::vector<int>> &eval_batch,
                            int threads) {
    if (original.cfg.vocab != pruned.cfg.vocab) {
        throw InputError("vocab mismatch: " + std::to_string(original.cfg.vocab) +
                         " vs " + std::to_string(pruned.cfg.vocab));
    }
    if (eval_batch.empty()) throw InputError("empty eval batch");
    std::vector<double> seq_err(eval_batch.size(), 0.0);
    std::vector<long long> seq_pos(eval_batch.size(), 0);
    parallel_for(int(eval_batch.size()), threads, [&](int i) {
        const auto &seq = eval_batch[size_t(i)];
        const Tensor2 ya = forward(original, seq);
        const Tensor2 yb = forward(pruned, seq);
        double acc = 0.0;
        for (size_t e = 0; e < ya.size(); ++e) {
            const double d = double(ya.data()[e]) - double(yb.data()[e]);
            acc += d * d;
        }
        seq_err[size_t(i)] = acc;
        seq_pos[size_t(i)] = ya.rows();
    });
    double total = 0.0;
    long long positions = 0;
    for (size_t i = 0; i < seq_err.size(); ++i) {
        total += seq_err[i];
        positions += seq_pos[i];
    }
    return total / double(positions);
}

std::vector<std::vector<int>>
load_eval_batch(const std::vector<DomainSpec> &domains, const IterOptions &opts) {
    Rng rng(opts.eval_seed);
    std::vector<std::vector<int>> batch;
    const int per_domain = opts.resolved_eval_n();
    for (const DomainSpec &d : domains) {
        auto seqs = load_corpus(d, opts.seq_len, per_domain, rng);
        for (auto &s : seqs) batch.push_back(std::move(s));
    }
    if (batch.empty()) throw ConfigError("eval batch is empty");
    return batch;
}

namespace {

struct SitePlan {
    PruneSite site;
    int units_at_init = 0;
    int live_target = 0; // after this step
};

// Per-site z-scores over live units, ranked globally; cheapest-score units go
// first under a parameter budget. A unit is skipped when its site would empty
// or its cost overruns the remaining budget.
std::vector<int> global_live_targets(const Model &m,
                                     const std::vector<FluctuationScores> &scores,
                                     long long budget_params) {
    const std::vector<PruneSite> sites = prune_sites(m);
    struct Unit {
        double z;
        int site;
        int unit;
        long long cost;
    };
    std::vector<Unit> units;
    std::vector<int> live(sites.size());
    for (size_t s = 0; s < sites.size(); ++s) {
        const std::vector<float> &per_unit = scores[s].per_unit;
        live[s] = int(per_unit.size());
        double mean = 0.0;
        for (float v : per_unit) mean += double(v);
        mean /= double(per_unit.size());
        double var = 0.0;
        for (float v : per_unit) var += (double(v) - mean) * (double(v) - mean);
        const double sd = per_unit.size() > 1
                              ? std::sqrt(var / double(per_unit.size() - 1))
                              : 0.0;
        const long long cost =
            sites[s].kind == SiteKind::AttnHeads
                ? 4LL * m.cfg.head_dim * m.cfg.d_model
                : 3LL * m.cfg.d_model;
        for (size_t u = 0; u < per_unit.size(); ++u) {
            const double z = sd > 0 ? (double(per_unit[u]) - mean) / sd : 0.0;
            units.push_back({z, int(s), int(u), cost});
        }
    }
    std::sort(units.begin(), units.end(), [](const Unit &a, const Unit &b) {
        if (a.z != b.z) return a.z < b.z;
        if (a.site != b.site) return a.site < b.site;
        return a.unit < b.unit;
    });
    long long spent = 0;
    for (const Unit &u : units) {
        if (live[size_t(u.site)] <= 1) continue;
        if (spent + u.cost > budget_params) continue;
        --live[size_t(u.site)];
        spent += u.cost;
    }
    return live;
}

DomainStats collect_step_stats(const Model &current,
                               const std::vector<std::vector<std::vector<int>>> &seqs,
                               const std::vector<std::string> &ids,
                               const IterOptions &opts) {
    if (opts.stats_cache_dir.empty()) {
        return collect_domain_stats(current, seqs, ids, opts.threads);
    }
    const uint64_t hash = model_hash(current);
    const std::string path =
        (std::filesystem::path(opts.stats_cache_dir) /
         ("stats-" + hash_hex(hash) + "-" + std::to_string(opts.seed) + ".pksc"))
            .string();
    DomainStats cached;
    if (load_stats_cache(path, hash, opts.seed, opts.seq_len, opts.n_samples,
                         ids, &cached)) {
        return cached;
    }
    DomainStats fresh = collect_domain_stats(current, seqs, ids, opts.threads);
    std::filesystem::create_directories(opts.stats_cache_dir);
    save_stats_cache(path, fresh, hash, opts.seed, opts.seq_len, opts.n_samples);
    return fresh;
}

} // namespace

Model iterative_prune(const Model &m, const std::vector<DomainSpec> &domains,
                      const Schedule &schedule, const IterOptions &opts,
                      PruneReport &report) {
    const auto t0 = std::chrono::steady_clock::now();
    schedule.validate();
    if (domains.empty()) throw ConfigError("at least one domain is required");
    const std::vector<double> alphas = normalized_alphas(domains);
    const std::vector<double> ratios = schedule.cumulative_ratios();

    report.config_echo = opts.config_echo;
    report.original_hash = hash_hex(model_hash(m));
    report.params_before = param_count(m);
    report.prunable_before = prunable_param_count(m);
    report.target_ratio = schedule.target_ratio;

    // one load per run: every step reuses the same sample offsets, so
    // differences across steps reflect model changes, not sampling noise
    Rng corpus_rng(opts.seed);
    std::vector<std::vector<std::vector<int>>> stats_seqs;
    std::vector<std::string> domain_ids;
    for (const DomainSpec &d : domains) {
        stats_seqs.push_back(load_corpus(d, opts.seq_len, opts.n_samples, corpus_rng));
        domain_ids.push_back(d.domain);
    }
    const std::vector<std::vector<int>> eval_batch = load_eval_batch(domains, opts);

    Model current = m;
    const std::vector<PruneSite> sites = prune_sites(current);
    std::vector<int> units_at_init(sites.size());
    std::vector<int> final_live(sites.size());
    for (size_t s = 0; s < sites.size(); ++s) {
        units_at_init[s] = site_units(current, sites[s]);
        const int pruned =
            int(std::floor(double(units_at_init[s]) * schedule.target_ratio));
        final_live[s] = std::max(1, units_at_init[s] - pruned);
    }
    const long long prunable0 = report.prunable_before;

    std::vector<double> trace;
    for (int s = 1; s <= int(ratios.size()); ++s) {
        const double r = ratios[size_t(s - 1)];

        StepRecord step;
        step.step = s;
        step.cumulative_ratio = r;
        step.stats_model_hash = hash_hex(model_hash(current));

        // statistics conditioned on every mask applied so far
        const DomainStats ds =
            collect_step_stats(current, stats_seqs, domain_ids, opts);
        const MixedStats mixed = mix_stats(ds, alphas);

        std::vector<FluctuationScores> all_scores;
        all_scores.reserve(sites.size());
        for (const PruneSite &site : sites) {
            all_scores.push_back(score(mixed, current, site));
        }

        // live-unit targets for this step's cumulative ratio
        std::vector<int> targets(sites.size());
        if (opts.allocation == Allocation::Uniform) {
            for (size_t i = 0; i < sites.size(); ++i) {
                const int pruned = int(std::floor(double(units_at_init[i]) * r));
                targets[i] = std::max(1, units_at_init[i] - pruned);
            }
        } else {
            const long long budget = (long long)std::floor(double(prunable0) * r);
            targets = global_live_targets(current, all_scores, budget);
        }
        for (size_t i = 0; i < sites.size(); ++i) {
            if (targets[i] < 1) {
                throw ConfigError("step " + std::to_string(s) +
                                  " would empty block " +
                                  std::to_string(sites[i].block) + " " +
                                  site_kind_name(sites[i].kind));
            }
        }

        for (size_t i = 0; i < sites.size(); ++i) {
            const PruneSite site = sites[i];
            const int live_now = site_units(current, site);
            SiteStepRecord rec;
            rec.site = site;
            const FluctuationScores &sc = all_scores[i];
            if (!sc.per_unit.empty()) {
                rec.score_min = *std::min_element(sc.per_unit.begin(), sc.per_unit.end());
                rec.score_max = *std::max_element(sc.per_unit.begin(), sc.per_unit.end());
                double mean = 0.0;
                for (float v : sc.per_unit) mean += double(v);
                rec.score_mean = mean / double(sc.per_unit.size());
            }
            if (targets[i] < live_now) {
                const PruneMask prior = all_keep_mask(current, site);
                const PruneMask mask = select_mask(sc, targets[i], prior);
                const BiasVector bias = compensate(current, site, mask, mixed);
                double l2 = 0.0;
                for (float v : bias.values) l2 += double(v) * double(v);
                rec.bias_l2 = std::sqrt(l2);
                apply_prune(current, site, mask, bias);
            }
            rec.pruned_units = live_now - site_units(current, site);
            rec.live_units = site_units(current, site);
            step.sites.push_back(rec);
        }

        step.recon_error =
            reconstruction_error(m, current, eval_batch, opts.threads);
        trace.push_back(step.recon_error);
        step.converged = converged(trace, opts.adaptive_tol);
        report.steps.push_back(step);

        if (opts.adaptive && step.converged) {
            bool at_target = true;
            for (size_t i = 0; i < sites.size(); ++i) {
                if (site_units(current, sites[i]) != final_live[i]) {
                    at_target = false;
                    break;
                }
            }
            if (at_target && s < int(ratios.size())) {
                report.converged_early = true;
                break;
            }
        }
    }

    report.pruned_hash = hash_hex(model_hash(current));
    report.params_after = param_count(current);
    report.prunable_after = prunable_param_count(current);
    report.achieved_ratio =
        double(report.prunable_before - report.prunable_after) /
        double(report.prunable_before);
    report.wallclock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    return current;
}

json PruneReport::to_json() const {
    json steps_json = json::array();
    for (const StepRecord &s : steps) {
        json sites_json = json::array();
        for (const SiteStepRecord &r : s.sites) {
            sites_json.push_back({{"block", r.site.block},
                                  {"site", site_kind_name(r.site.kind)},
                                  {"pruned_units", r.pruned_units},
                                  {"live_units", r.live_units},
                                  {"score_min", r.score_min},
                                  {"score_max", r.score_max},
                                  {"score_mean", r.score_mean},
                                  {"bias_l2", r.bias_l2}});
        }
        steps_json.push_back({{"step", s.step},
                              {"cumulative_ratio", s.cumulative_ratio},
                              {"stats_model_hash", s.stats_model_hash},
                              {"sites", sites_json},
                              {"recon_error", s.recon_error},
                              {"converged", s.converged}});
    }
    json out = {{"config", config_echo},
                {"original", {{"hash", original_hash},
                              {"params", params_before},
                              {"prunable_params", prunable_before}}},
                {"pruned", {{"hash", pruned_hash},
                            {"params", params_after},
                            {"prunable_params", prunable_after}}},
                {"ratio", {{"target", target_ratio}, {"achieved", achieved_ratio}}},
                {"steps", steps_json},
                {"converged_early", converged_early},
                {"wallclock_sec", wallclock_sec}};
    out["error"] = error.empty() ? json(nullptr) : json(error);
    return out;
}

std::string PruneReport::objective_trace_csv() const {
    std::string csv = "step,recon_error\n";
    for (const StepRecord &s : steps) {
        csv += std::to_string(s.step) + "," + std::to_string(s.recon_error) + "\n";
    }
    return csv;
}

json compare_arms(const Model &m, const std::vector<DomainSpec> &domains,
                  const std::vector<ArmSpec> &arms, const IterOptions &opts) {
    if (arms.size() < 2) throw ConfigError("compare needs at least two arms");

    // one eval batch from the full mixture, shared by every arm
    const std::vector<std::vector<int>> eval_batch = load_eval_batch(domains, opts);

    json arms_json = json::array();
    std::vector<double> errors;
    for (const ArmSpec &arm : arms) {
        std::vector<DomainSpec> arm_domains;
        if (arm.domains_subset.empty()) {
            arm_domains = domains;
        } else {
            for (const std::string &want : arm.domains_subset) {
                bool found = false;
                for (const DomainSpec &d : domains) {
                    if (d.domain == want) {
                        arm_domains.push_back(d);
                        found = true;
                        break;
                    }
                }
                if (!found) {
                    throw ConfigError("arm '" + arm.name +
                                      "' references unknown domain '" + want + "'");
                }
            }
        }
        IterOptions arm_opts = opts;
        arm_opts.allocation = arm.allocation;
        arm_opts.config_echo = {{"arm", arm.name},
                                {"steps", arm.schedule.steps},
                                {"target_ratio", arm.schedule.target_ratio},
                                {"curve", curve_name(arm.schedule.curve)},
                                {"allocation", allocation_name(arm.allocation)}};
        PruneReport report;
        Model pruned = iterative_prune(m, arm_domains, arm.schedule, arm_opts, report);
        const double err =
            reconstruction_error(m, pruned, eval_batch, opts.threads);
        errors.push_back(err);
        arms_json.push_back({{"name", arm.name},
                             {"recon_error", err},
                             {"report", report.to_json()}});
    }

    json deltas = json::array();
    for (size_t a = 0; a < arms.size(); ++a) {
        for (size_t b = a + 1; b < arms.size(); ++b) {
            deltas.push_back({{"a", arms[a].name},
                              {"b", arms[b].name},
                              {"delta", errors[a] - errors[b]}});
        }
    }
    return {{"eval", {{"seed", opts.eval_seed}, {"n_sequences", eval_batch.size()}}},
            {"arms", arms_json},
            {"deltas", deltas}};
}

} // namespace prunekit
