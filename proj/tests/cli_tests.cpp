// Integration tests that drive the prunekit binary end to end.
// Usage: cli_tests <path-to-prunekit-binary> <fixtures-dir>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "prunekit/iterloop.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void check(bool ok, const std::string &what) {
    if (ok) {
        std::cout << "  ok: " << what << "\n";
    } else {
        ++g_failures;
        std::cout << "  FAILED: " << what << "\n";
    }
}

struct RunResult {
    int exit_code = -1;
    std::string output;
};

RunResult run(const std::string &cmd) {
    const std::string out_file =
        (fs::temp_directory_path() / "pk_cli_out.txt").string();
    const std::string full = cmd + " > " + out_file + " 2>&1";
    const int raw = std::system(full.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    std::ifstream f(out_file);
    std::stringstream ss;
    ss << f.rdbuf();
    r.output = ss.str();
    return r;
}

std::string file_bytes(const std::string &path) {
    std::ifstream f(path, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

json load_json(const std::string &path) {
    std::ifstream f(path);
    return json::parse(f);
}

} // namespace

int main(int argc, char **argv) {
    if (argc < 3) {
        std::cerr << "usage: cli_tests <prunekit-binary> <fixtures-dir>\n";
        return 2;
    }
    const std::string bin = argv[1];
    const fs::path fixtures = argv[2];
    const std::string manifest = (fixtures / "manifest.json").string();
    const fs::path work = fs::temp_directory_path() / "pk_cli_work";
    fs::remove_all(work);
    fs::create_directories(work);
    const std::string model = (work / "model.pkit").string();

    const std::string size_flags =
        " --d-model 32 --blocks 2 --heads 4 --head-dim 8 --d-mlp 64 --max-seq 48";
    const std::string small =
        " --n-samples 8 --seq-len 24 --eval-n 6 --threads 2";

    std::cout << "init:\n";
    {
        auto r = run(bin + " init --out " + model + size_flags + " --seed 7");
        check(r.exit_code == 0, "init exits 0");
        auto r2 = run(bin + " init --out " + (work / "model2.pkit").string() +
                      size_flags + " --seed 7");
        check(r2.exit_code == 0, "second init exits 0");
        check(file_bytes(model) == file_bytes((work / "model2.pkit").string()),
              "same seed gives a stable file");
        // everything after the "wrote <path>" line is path-independent
        check(r.output.substr(r.output.find('\n')) ==
                  r2.output.substr(r2.output.find('\n')),
              "printed summary is stable");

        // param count printed by the CLI matches the library
        const prunekit::Model m = prunekit::load_model(model);
        check(r.output.find("params " + std::to_string(prunekit::param_count(m))) !=
                  std::string::npos,
              "printed param count matches param_count()");

        auto bad = run(bin + " init --out " + (work / "bad.pkit").string() +
                       " --d-model 30 --heads 4 --head-dim 8");
        check(bad.exit_code == 2, "inconsistent head geometry exits 2");
    }

    std::cout << "prune:\n";
    const std::string pruned = (work / "pruned.pkit").string();
    const std::string report_path = (work / "report.json").string();
    {
        const std::string model_before = file_bytes(model);
        auto r = run(bin + " prune --model " + model + " --manifest " + manifest +
                     " --out " + pruned + " --report " + report_path +
                     " --ratio 0.25 --steps 1" + small);
        check(r.exit_code == 0, "one-shot prune exits 0");
        check(file_bytes(model) == model_before, "input model is not mutated");
        const json report = load_json(report_path);
        check(report["steps"].size() == 1, "report shows one step");
        const double achieved = report["ratio"]["achieved"].get<double>();
        check(std::abs(achieved - 0.25) < 0.05, "achieved ratio near 0.25");
        check(report["error"].is_null(), "no error recorded");
        check(report["config"]["command"] == "prune", "config echo present");

        auto r4 = run(bin + " prune --model " + model + " --manifest " + manifest +
                      " --out " + (work / "pruned4.pkit").string() + " --report " +
                      (work / "report4.json").string() +
                      " --trace-csv " + (work / "trace.csv").string() +
                      " --ratio 0.5 --steps 4" + small);
        check(r4.exit_code == 0, "iterative prune exits 0");
        const json rep4 = load_json((work / "report4.json").string());
        check(rep4["steps"].size() == 4, "four steps recorded");
        bool monotone = true;
        for (size_t s = 1; s < 4; ++s) {
            for (size_t i = 0; i < rep4["steps"][0]["sites"].size(); ++i) {
                if (rep4["steps"][s]["sites"][i]["live_units"].get<int>() >
                    rep4["steps"][s - 1]["sites"][i]["live_units"].get<int>()) {
                    monotone = false;
                }
            }
        }
        check(monotone, "live counts are monotone over steps");
        std::ifstream trace((work / "trace.csv").string());
        std::string header;
        std::getline(trace, header);
        check(header == "step,recon_error", "trace CSV written");

        auto missing = run(bin + " prune --model " + model +
                           " --manifest /nonexistent/mix.json --out " +
                           (work / "nope.pkit").string() + small);
        check(missing.exit_code == 2, "missing manifest exits 2");
        check(!fs::exists(work / "nope.pkit"), "no output written on failure");
    }

    std::cout << "determinism:\n";
    {
        const std::string a = (work / "det_a.pkit").string();
        const std::string b = (work / "det_b.pkit").string();
        const std::string ra = (work / "det_a.json").string();
        const std::string rb = (work / "det_b.json").string();
        auto r1 = run(bin + " prune --model " + model + " --manifest " + manifest +
                      " --out " + a + " --report " + ra +
                      " --ratio 0.5 --steps 2 --n-samples 8 --seq-len 24 --eval-n 6 --threads 1");
        auto r2 = run(bin + " prune --model " + model + " --manifest " + manifest +
                      " --out " + b + " --report " + rb +
                      " --ratio 0.5 --steps 2 --n-samples 8 --seq-len 24 --eval-n 6 --threads 8");
        check(r1.exit_code == 0 && r2.exit_code == 0, "both runs exit 0");
        check(file_bytes(a) == file_bytes(b), "threads 1 and 8 agree bit-exactly");
        json ja = load_json(ra);
        json jb = load_json(rb);
        ja["wallclock_sec"] = 0;
        jb["wallclock_sec"] = 0;
        // the config echo faithfully records the argv differences; blank the
        // fields that were deliberately varied
        for (json *j : {&ja, &jb}) {
            (*j)["config"]["threads"] = 0;
            (*j)["config"]["out"] = "";
            (*j)["config"]["report"] = "";
        }
        check(ja == jb, "reports identical modulo wall-clock and thread count");
    }

    std::cout << "eval:\n";
    {
        auto self = run(bin + " eval --original " + model + " --pruned " + model +
                        " --manifest " + manifest + small);
        check(self.exit_code == 0, "self-eval exits 0");
        check(self.output.find("recon_error 0 ") != std::string::npos,
              "identical models give zero error");

        // matches the last objective the prune run recorded (same eval knobs)
        auto ev = run(bin + " eval --original " + model + " --pruned " + pruned +
                      " --manifest " + manifest + " --out " +
                      (work / "eval.json").string() + small);
        check(ev.exit_code == 0, "eval exits 0");
        const json report = load_json(report_path);
        const double recorded =
            report["steps"].back()["recon_error"].get<double>();
        const double measured =
            load_json((work / "eval.json").string())["recon_error"].get<double>();
        check(std::abs(measured - recorded) <=
                  1e-12 * std::max(1.0, std::abs(recorded)),
              "eval matches the run's final objective");

        auto bad = run(bin + " eval --original " + model + " --pruned " +
                       (work / "missing.pkit").string() + " --manifest " + manifest);
        check(bad.exit_code == 2, "missing pruned model exits 2");

        // corrupt model file: runtime failure, exit 1
        const std::string corrupt = (work / "corrupt.pkit").string();
        std::ofstream c(corrupt, std::ios::binary);
        c << "PKITgarbage-not-a-real-model";
        c.close();
        auto broken = run(bin + " eval --original " + model + " --pruned " +
                          corrupt + " --manifest " + manifest);
        check(broken.exit_code == 1, "corrupt model exits 1");
    }

    std::cout << "compare:\n";
    {
        const std::string cmp = (work / "compare.json").string();
        auto r = run(bin + " compare --model " + model + " --manifest " + manifest +
                     " --out " + cmp + " --ratio 0.5 --steps 3" + small);
        check(r.exit_code == 0, "compare exits 0");
        const json out = load_json(cmp);
        check(out["arms"].size() == 3, "three arms present");
        check(out["deltas"].size() == 3, "pairwise deltas present");
        bool has_named = false;
        for (const auto &arm : out["arms"]) {
            if (arm["name"] == "iterative_mixed") has_named = true;
        }
        check(has_named, "iterative_mixed arm present");
        check(std::count(r.output.begin(), r.output.end(), '\n') >= 3,
              "one summary line per arm");

        const std::string sweep = (work / "sweep.json").string();
        auto rs = run(bin + " compare --model " + model + " --manifest " + manifest +
                      " --out " + sweep + " --ratio 0.5 --steps 2 --seeds 3" + small);
        check(rs.exit_code == 0, "seed sweep exits 0");
        const json sj = load_json(sweep);
        check(sj["runs"].size() == 3, "per-seed results present");
        check(sj.contains("win_rate"), "win-rate present");
        check(rs.output.find("win-rate") != std::string::npos,
              "win-rate line printed");
    }

    std::cout << "stats:\n";
    {
        const std::string csv = (work / "scores.csv").string();
        auto r = run(bin + " stats --model " + model + " --manifest " + manifest +
                     " --out " + csv + small);
        check(r.exit_code == 0, "stats exits 0");
        std::ifstream f(csv);
        std::string line;
        std::getline(f, line);
        check(line == "block,site,unit,score", "CSV header");
        int rows = 0;
        while (std::getline(f, line)) ++rows;
        check(rows == 2 * (4 + 64), "one row per unit"); // 2 blocks x (heads + mlp)
    }

    fs::remove_all(work);
    if (g_failures) {
        std::cout << g_failures << " CLI check(s) failed\n";
        return 1;
    }
    std::cout << "all CLI checks passed\n";
    return 0;
}
