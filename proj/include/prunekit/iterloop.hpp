#pragma once

#include <json.hpp>

#include "prunekit/calib.hpp"
#include "prunekit/model.hpp"
#include "prunekit/prune.hpp"

namespace prunekit {

enum class Curve { Linear, Geometric };
enum class Allocation { Uniform, Global };

Curve curve_from_name(const std::string &name);       // "linear" | "geometric"
Allocation allocation_from_name(const std::string &name); // "uniform" | "global"
std::string curve_name(Curve c);
std::string allocation_name(Allocation a);

// Cumulative pruning schedule r_1 < r_2 < ... < r_S = target_ratio.
// Linear grows the pruned fraction by target/S per step; Geometric removes an
// equal multiplicative slice of the surviving units per step. S=1 degenerates
// to one-shot pruning.
struct Schedule {
    double target_ratio = 0.5;
    int steps = 4;
    Curve curve = Curve::Linear;

    void validate() const; // ConfigError on ratio outside (0,1) or steps < 1
    std::vector<double> cumulative_ratios() const;
};

struct SiteStepRecord {
    PruneSite site;
    int pruned_units = 0; // this step
    int live_units = 0;   // after this step
    float score_min = 0.0f;
    float score_max = 0.0f;
    double score_mean = 0.0;
    double bias_l2 = 0.0;
};

struct StepRecord {
    int step = 0;
    double cumulative_ratio = 0.0;
    // hash of the model the step's statistics were collected from: proof that
    // step s conditions on every mask applied before it
    std::string stats_model_hash;
    std::vector<SiteStepRecord> sites;
    double recon_error = 0.0;
    bool converged = false;
};

struct PruneReport {
    nlohmann::json config_echo;
    std::string original_hash;
    std::string pruned_hash;
    long long params_before = 0;
    long long params_after = 0;
    long long prunable_before = 0;
    long long prunable_after = 0;
    double target_ratio = 0.0;
    double achieved_ratio = 0.0;
    std::vector<StepRecord> steps;
    bool converged_early = false;
    double wallclock_sec = 0.0;
    std::string error; // empty on success; set when a run ended mid-flight

    nlohmann::json to_json() const;
    std::string objective_trace_csv() const; // "step,recon_error" rows
};

struct IterOptions {
    int seq_len = 64;
    int n_samples = 32;     // stats sequences per domain
    uint64_t seed = 0;      // calibration sampling seed
    uint64_t eval_seed = 1; // held-out eval sampling seed (independent draws)
    double eval_fraction = 0.2;
    int eval_n = -1; // eval sequences per domain; -1 derives from eval_fraction
    Allocation allocation = Allocation::Uniform;
    int threads = 1;
    bool adaptive = false;     // skip trailing no-op steps once converged
    double adaptive_tol = 0.01;
    std::string stats_cache_dir; // optional; one cache file per model hash
    nlohmann::json config_echo;  // echoed verbatim into the report

    int resolved_eval_n() const;
};

// Mean over token positions of the squared L2 logit difference between the
// two models, deterministic for a fixed batch.
double reconstruction_error(const Model &original, const Model &pruned,
                            const std::vector<std::vector<int>> &eval_batch,
                            int threads = 1);

// Relative-delta plateau test over the objective trace:
// |e_s - e_{s-1}| / max(e_{s-1}, 1e-12) < tol. False with fewer than two
// recorded values.
bool converged(const std::vector<double> &objective_trace, double tol);

// Held-out evaluation sequences, drawn per domain with eval_seed. Never fed
// to statistics, so changing eval_seed changes measured errors but not masks.
std::vector<std::vector<int>>
load_eval_batch(const std::vector<DomainSpec> &domains, const IterOptions &opts);

// The full loop: per step, collect statistics on the current (partially
// pruned, bias-compensated) model, mix across domains, score, select masks to
// the step's cumulative ratio, compensate and apply; record the objective
// after every step. The report is filled in progressively so a caller
// catching a mid-run failure still holds the completed steps.
Model iterative_prune(const Model &m, const std::vector<DomainSpec> &domains,
                      const Schedule &schedule, const IterOptions &opts,
                      PruneReport &report);

struct ArmSpec {
    std::string name;
    Schedule schedule;
    Allocation allocation = Allocation::Uniform;
    // restrict calibration to these manifest domains (weights renormalized);
    // empty means the full mixture
    std::vector<std::string> domains_subset;
};

// Runs every arm from an identical model copy and seed and evaluates all
// final models on one shared eval batch drawn from the full mixture.
nlohmann::json compare_arms(const Model &m,
                            const std::vector<DomainSpec> &domains,
                            const std::vector<ArmSpec> &arms,
                            const IterOptions &opts);

} // namespace prunekit
