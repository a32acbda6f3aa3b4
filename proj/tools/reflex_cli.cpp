#include "reflex/dataset.hpp"
#include "reflex/diffusion.hpp"
#include "reflex/evaluator.hpp"
#include "reflex/planner.hpp"
#include "reflex/run_config.hpp"
#include "reflex/svg.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace reflex;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

// Options shared by every command. Precedence: flags > REFLEX_SEED > file > defaults.
struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<int> workers;
    std::string out;
    bool force = false;

    void add(CLI::App* app, bool out_required = true) {
        app->add_option("--config", config, "JSON config, or a run.json written by an earlier command")
            ->check(CLI::ExistingFile);
        app->add_option("--seed", seed, "master seed");
        app->add_option("--workers", workers, "scenario / training worker count")->check(CLI::PositiveNumber);
        auto* o = app->add_option("--out", out, "output directory");
        if (out_required) o->required();
        app->add_flag("--force", force, "overwrite existing outputs");
    }

    RunConfig resolve(const RunConfig& base = default_run_config()) const {
        RunConfig cfg = base;
        if (!config.empty()) {
            json j = json::parse(read_text(config));
            // a run manifest carries the resolved config under "config"
            if (j.is_object() && j.contains("command") && j.contains("config")) j = j.at("config");
            cfg = parse_run_config(j.dump(), base);
        }
        apply_env_seed(cfg);
        if (seed) {
            cfg.seed = *seed;
            derive_seeds(cfg);
        }
        if (workers) cfg.workers = *workers;
        cfg.train.workers = cfg.workers;
        if (!out.empty()) cfg.out_dir = out;
        cfg.validate();
        return cfg;
    }
};

void prepare_out(const fs::path& dir, const std::vector<std::string>& files, bool force) {
    fs::create_directories(dir);
    for (const auto& f : files)
        if (fs::exists(dir / f) && !force)
            throw std::runtime_error((dir / f).string() + " exists; pass --force to overwrite");
}

json manifest(const std::string& command, const RunConfig& cfg, json inputs = json::object()) {
    return {{"command", command}, {"config", json::parse(to_json_string(cfg))}, {"inputs", std::move(inputs)}};
}

std::map<ScenarioKind, double> parse_weights(const std::string& text) {
    std::map<ScenarioKind, double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        const auto colon = item.find(':');
        try {
            const ScenarioKind kind = parse_kind(item.substr(0, colon));
            out[kind] = colon == std::string::npos ? 1.0 : std::stod(item.substr(colon + 1));
        } catch (const InvalidArgument& e) {
            throw UsageError(e.what());
        } catch (const std::exception&) {
            throw UsageError("bad weight in '" + item + "'");
        }
    }
    if (out.empty()) throw UsageError("--kinds is empty");
    return out;
}

/// Scenario list from "kind:count,..." or a dataset directory.
std::vector<Scenario> load_suite(const std::string& suite, const RunConfig& cfg) {
    if (suite.empty()) return generate_suite(cfg.eval_suite);
    if (fs::is_directory(suite)) {
        std::vector<Scenario> out;
        for (const auto& e : read_dataset(suite)) out.push_back(generate_scenario(e.record.kind, e.record.seed));
        return out;
    }
    try {
        return generate_suite(SuiteSpec::parse(suite, cfg.eval_suite.seed));
    } catch (const InvalidArgument& e) {
        throw UsageError(e.what());
    }
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

// ---------------------------------------------------------------- gen-data

struct GenData {
    Common common;
    std::string kinds;
    std::optional<int> count;

    void add(CLI::App& root) {
        auto* app = root.add_subcommand("gen-data", "generate a scenario dataset");
        common.add(app);
        app->add_option("--kinds", kinds, "kind:weight list, e.g. u_turn:0.4,sharp_curve:0.25");
        app->add_option("--count", count, "number of scenarios")->check(CLI::NonNegativeNumber);
        app->callback([this] { run(); });
    }

    void run() {
        RunConfig cfg = common.resolve();
        SuiteSpec suite = cfg.data_suite;
        if (!kinds.empty() || count) {
            std::map<ScenarioKind, double> w;
            if (!kinds.empty()) {
                w = parse_weights(kinds);
            } else {
                for (const auto& [k, n] : suite.counts) w[k] = n;
            }
            suite = split_suite(w, count.value_or(suite.total()), suite.seed);
        }
        cfg.data_suite = suite;
        const fs::path dir = cfg.out_dir;
        prepare_out(dir, {"run.json"}, common.force);
        write_dataset(dir, generate_suite(suite), common.force);
        const auto entries = read_dataset(dir);
        json m = manifest("gen-data", cfg, {{"manifest.jsonl", file_digest(dir / "manifest.jsonl")},
                                            {"payload.f32", file_digest(dir / "payload.f32")}});
        m["scenarios"] = entries.size();
        m["high_lat_fraction"] = high_lat_fraction(entries);
        write_text(dir / "run.json", m.dump(2) + "\n");
        std::printf("wrote %zu scenarios to %s (%s)\n", entries.size(), dir.c_str(), suite_to_string(suite).c_str());
        std::printf("high-lat fraction %.3f, digest %s/%s\n", high_lat_fraction(entries),
                    m["inputs"]["manifest.jsonl"].get<std::string>().c_str(),
                    m["inputs"]["payload.f32"].get<std::string>().c_str());
    }
};

// ---------------------------------------------------------------- train

TrainResult train_from(const std::vector<DatasetEntry>& entries, const TrainConfig& tc, const TrainResume* resume) {
    const auto examples = to_examples(entries, tc.model.shape.agents);
    const int every = std::max(1, tc.steps / 20);
    return train(examples, tc, [&](int step, double loss) {
        if ((step + 1) % every == 0) std::fprintf(stderr, "  step %6d  loss %.4f\n", step + 1, loss);
    }, resume);
}

void write_loss_csv(const fs::path& path, const std::vector<double>& losses, int first_step, bool keep_head) {
    std::vector<std::string> head;
    if (keep_head && fs::exists(path)) {
        std::ifstream in(path);
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            if (std::stoi(line.substr(0, line.find(','))) >= first_step) break;
            head.push_back(line);
        }
    }
    std::ofstream out(path, std::ios::trunc);
    out << "step,loss\n";
    for (const auto& l : head) out << l << '\n';
    char buf[64];
    for (std::size_t i = 0; i < losses.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%d,%.9g\n", first_step + static_cast<int>(i), losses[i]);
        out << buf;
    }
}

struct Train {
    Common common;
    std::string data;
    std::optional<int> steps, stop_at, batch;
    std::optional<double> p_drop, lr;
    bool resume = false;

    void add(CLI::App& root) {
        auto* app = root.add_subcommand("train", "train the denoiser");
        common.add(app);
        app->add_option("--data", data, "dataset directory")->required();
        app->add_option("--steps", steps, "optimizer steps")->check(CLI::PositiveNumber);
        app->add_option("--stop-at", stop_at, "pause before this step")->check(CLI::NonNegativeNumber);
        app->add_option("--batch", batch)->check(CLI::PositiveNumber);
        app->add_option("--p-drop", p_drop, "conditional dropout rate")->check(CLI::Range(0.0, 1.0));
        app->add_option("--lr", lr, "peak learning rate")->check(CLI::PositiveNumber);
        app->add_flag("--resume", resume, "continue from model.ckpt and train_state.bin in --out");
        app->callback([this] { run(); });
    }

    void run() {
        const fs::path dir = common.out;
        RunConfig base = default_run_config();
        if (resume && common.config.empty() && fs::exists(dir / "run.json")) common.config = (dir / "run.json").string();
        RunConfig cfg = common.resolve(base);
        if (steps) cfg.train.steps = *steps;
        if (stop_at) cfg.train.stop_at = *stop_at;
        if (batch) cfg.train.batch = *batch;
        if (p_drop) cfg.train.p_drop = *p_drop;
        if (lr) cfg.train.learning_rate = *lr;
        cfg.validate();
        if (!fs::exists(fs::path(data) / "manifest.jsonl")) throw std::runtime_error("no dataset at " + data);

        std::optional<TrainResume> state;
        if (resume) {
            const Denoiser prev = load_checkpoint(dir / "model.ckpt");
            TrainState ts = load_train_state(dir / "train_state.bin", prev.spec().shape);
            state = TrainResume{prev.params(), std::move(ts.velocity), std::move(ts.second_moment), ts.step};
        } else {
            prepare_out(dir, {"model.ckpt", "train_state.bin", "loss.csv", "run.json"}, common.force);
        }

        const auto entries = read_dataset(data);
        std::printf("training on %zu scenarios, steps %d, p_drop %g\n", entries.size(), cfg.train.steps,
                    cfg.train.p_drop);
        const TrainResult r = train_from(entries, cfg.train, state ? &*state : nullptr);
        save_checkpoint(dir / "model.ckpt", r.model);
        save_train_state(dir / "train_state.bin", {r.velocity, r.second_moment, r.next_step});
        const int first = state ? state->start_step : 0;
        write_loss_csv(dir / "loss.csv", r.loss_curve, first, resume);

        cfg.train.stop_at = 0;  // a re-run from the manifest trains to the end
        json m = manifest("train", cfg,
                          {{"data", fs::absolute(data).string()},
                           {"manifest.jsonl", file_digest(fs::path(data) / "manifest.jsonl")},
                           {"payload.f32", file_digest(fs::path(data) / "payload.f32")}});
        m["checkpoint"] = file_digest(dir / "model.ckpt");
        m["next_step"] = r.next_step;
        m["decoupled_fraction"] = r.draws ? static_cast<double>(r.decoupled_draws) / static_cast<double>(r.draws) : 0.0;
        write_text(dir / "run.json", m.dump(2) + "\n");
        if (!r.loss_curve.empty()) {
            const std::size_t k = std::min<std::size_t>(100, r.loss_curve.size());
            double head = 0.0, tail = 0.0;
            for (std::size_t i = 0; i < k; ++i) {
                head += r.loss_curve[i] / k;
                tail += r.loss_curve[r.loss_curve.size() - k + i] / k;
            }
            std::printf("loss %.4f -> %.4f (mean of %zu steps), checkpoint %s\n", head, tail, k,
                        (dir / "model.ckpt").c_str());
        }
    }
};

// ---------------------------------------------------------------- eval

void write_tables(const fs::path& dir, const MetricsTable& table) {
    write_text(dir / "metrics.csv", metrics_csv(table));
    write_text(dir / "summary.json", summary_json(table));
}

void write_svgs(const fs::path& dir, const MetricsTable& table, const std::vector<Scenario>& suite) {
    fs::create_directories(dir);
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        const MetricsRow& row = table.rows[i];
        const std::string title = row.planner + " / " + std::string(to_string(row.kind)) + " #" +
                                  std::to_string(row.scenario) + " / score " + fmt(row.breakdown.score);
        write_text(dir / (row.planner + "_" + std::to_string(row.scenario) + ".svg"),
                   scenario_svg(suite[static_cast<std::size_t>(row.scenario)], table.rollouts[i], title));
    }
}

void print_summary(const MetricsTable& table) {
    std::printf("%-22s %9s %10s %9s %9s %6s\n", "planner", "score", "violation", "triggers", "attempts", "fail");
    for (const auto& s : table.summary)
        std::printf("%-22s %9.2f %10.4f %9.3f %9.3f %6d\n", s.planner.c_str(), s.mean_score, s.mean_violation_rate,
                    s.trigger_rate, s.mean_attempts, s.failures);
}

struct Eval {
    Common common;
    std::string checkpoint, suite, reflection = "both";
    bool no_svg = false;

    void add(CLI::App& root) {
        auto* app = root.add_subcommand("eval", "closed-loop evaluation");
        common.add(app);
        app->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
        app->add_option("--suite", suite, "kind:count list or dataset directory (default: config eval suite)");
        app->add_option("--reflection", reflection, "on, off or both")->check(CLI::IsMember({"on", "off", "both"}));
        app->add_flag("--no-svg", no_svg, "skip per-scenario plots");
        app->callback([this] { run(); });
    }

    void run() {
        RunConfig cfg = common.resolve();
        const fs::path dir = cfg.out_dir;
        prepare_out(dir, {"metrics.csv", "summary.json", "run.json"}, common.force);
        const Denoiser model = load_checkpoint(checkpoint);
        const auto scenarios = load_suite(suite, cfg);
        if (scenarios.empty()) throw UsageError("evaluation suite is empty");

        DiffusionPlanner off(model, planner_config(cfg, false)), on(model, planner_config(cfg, true));
        std::vector<NamedPlanner> planners;
        if (reflection != "on") planners.emplace_back("reflection_off", off.closure());
        if (reflection != "off") planners.emplace_back("reflection_on", on.closure());
        if (planners.size() < 2) planners.emplace_back("ground_truth", ground_truth_planner());

        const MetricsTable table = compare_suite(planners, scenarios, cfg.rollout, cfg.workers);
        write_tables(dir, table);
        if (!no_svg) write_svgs(dir / "svg", table, scenarios);
        json m = manifest("eval", cfg, {{"checkpoint", fs::absolute(checkpoint).string()},
                                        {"checkpoint_digest", file_digest(checkpoint)}});
        m["suite"] = suite.empty() ? suite_to_string(cfg.eval_suite) : suite;
        m["reflection"] = reflection;
        write_text(dir / "run.json", m.dump(2) + "\n");
        print_summary(table);
    }
};

// ---------------------------------------------------------------- ablate

/// lambda1 endpoints reduce guidance to one branch; checked on a live scene.
void check_cfg_identities(const Denoiser& model, const Scenario& sc) {
    const ConditionSet cs = assemble_conditions(transform(sc.scene, ego_frame(sc.scene).inverse()));
    const NoiseSchedule s = model.schedule();
    std::mt19937_64 rng(7);
    std::normal_distribution<double> normal;
    const Eigen::VectorXd x = Eigen::VectorXd::NullaryExpr(model.state_dim(), [&] { return normal(rng); });
    for (int t : {1, s.T / 2, s.T}) {
        const GuidedNoise g0 = cfg_noise(model, x, t, cs, 0.0, s), g1 = cfg_noise(model, x, t, cs, 1.0, s);
        const double e0 = (g0.combined - g0.decoupled).cwiseAbs().maxCoeff();
        const double e1 = (g1.combined - g1.full).cwiseAbs().maxCoeff();
        if (e0 > 1e-12 || e1 > 1e-12)
            throw std::runtime_error("CFG identity failed at t=" + std::to_string(t) + ": " + fmt(e0) + ", " + fmt(e1));
    }
    std::printf("CFG identities hold at lambda1 = 0 and 1\n");
}

struct Ablate {
    Common common;
    std::string param, checkpoint, data, suite;
    std::vector<double> grid;

    void add(CLI::App& root) {
        auto* app = root.add_subcommand("ablate", "sweep one parameter");
        common.add(app);
        app->add_option("--param", param)->required()->check(CLI::IsMember({"p_drop", "lambda1", "lambda2", "gamma"}));
        app->add_option("--grid", grid, "values, comma separated")->required()->delimiter(',');
        app->add_option("--checkpoint", checkpoint, "model for inference-only sweeps")->check(CLI::ExistingFile);
        app->add_option("--data", data, "dataset for p_drop sweeps");
        app->add_option("--suite", suite, "kind:count list or dataset directory");
        app->callback([this] { run(); });
    }

    void run() {
        RunConfig cfg = common.resolve();
        const fs::path dir = cfg.out_dir;
        prepare_out(dir, {"ablation.csv", "ablation.svg", "metrics.csv", "summary.json", "run.json"}, common.force);
        const auto scenarios = load_suite(suite, cfg);
        if (scenarios.empty()) throw UsageError("evaluation suite is empty");

        std::vector<Denoiser> models;
        std::vector<RunConfig> configs;
        json inputs = json::object();
        if (param == "p_drop") {
            if (data.empty()) throw UsageError("--param p_drop retrains and needs --data");
            const auto entries = read_dataset(data);
            for (double v : grid) {
                RunConfig c = cfg;
                c.train.p_drop = v;
                c.validate();
                std::printf("training p_drop = %g\n", v);
                models.push_back(train_from(entries, c.train, nullptr).model);
                const fs::path ckpt = dir / ("p_drop_" + fmt(v) + ".ckpt");
                save_checkpoint(ckpt, models.back());
                inputs[ckpt.filename().string()] = file_digest(ckpt);
                configs.push_back(c);
            }
        } else {
            if (checkpoint.empty()) throw UsageError("--param " + param + " needs --checkpoint");
            models.push_back(load_checkpoint(checkpoint));
            inputs["checkpoint"] = fs::absolute(checkpoint).string();
            inputs["checkpoint_digest"] = file_digest(checkpoint);
            for (double v : grid) {
                RunConfig c = cfg;
                if (param == "lambda1") c.sampler.lambda1 = v;
                if (param == "lambda2") c.reflection.lambda2 = v;
                if (param == "gamma") c.reflection.gamma = v;
                if (param != "lambda1") c.reflection_enabled = true;
                c.validate();
                configs.push_back(c);
            }
            if (param == "lambda1") {
                bool has0 = false, has1 = false;
                for (double v : grid) {
                    has0 = has0 || v == 0.0;
                    has1 = has1 || v == 1.0;
                }
                if (has0 && has1) check_cfg_identities(models.front(), scenarios.front());
            }
        }

        std::vector<DiffusionPlanner> planners;
        planners.reserve(grid.size() + 1);
        std::vector<NamedPlanner> named;
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const Denoiser& m = models[param == "p_drop" ? i : 0];
            planners.emplace_back(m, planner_config(configs[i]));
            named.emplace_back(param + "=" + fmt(grid[i]), planners.back().closure());
        }
        if (named.size() < 2) {
            planners.emplace_back(models.front(), planner_config(cfg, false));
            named.emplace_back("reflection_off", planners.back().closure());
        }
        const MetricsTable table = compare_suite(named, scenarios, cfg.rollout, cfg.workers);
        write_tables(dir, table);

        std::ostringstream csv;
        csv << "param,value,mean_score,violation_rate,trigger_rate,mean_attempts,failures\n";
        std::vector<double> score, violation;
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const PlannerSummary& s = table.summary[i];
            char buf[256];
            std::snprintf(buf, sizeof buf, "%s,%.9g,%.9g,%.9g,%.9g,%.9g,%d\n", param.c_str(), grid[i], s.mean_score,
                          s.mean_violation_rate, s.trigger_rate, s.mean_attempts, s.failures);
            csv << buf;
            score.push_back(s.mean_score);
            violation.push_back(100.0 * s.mean_violation_rate);
        }
        write_text(dir / "ablation.csv", csv.str());
        write_text(dir / "ablation.svg", curve_svg(grid, {{"score", score}, {"violation %", violation}}, param,
                                                   "score / violation %", "sweep over " + param));
        write_text(dir / "run.json", manifest("ablate " + param, cfg, inputs).dump(2) + "\n");
        print_summary(table);
    }
};

// ---------------------------------------------------------------- bench

struct Bench {
    Common common;
    std::string checkpoint;
    int reps = 100, warmup = 3;

    void add(CLI::App& root) {
        auto* app = root.add_subcommand("bench", "per-step latency, reflection off / on");
        common.add(app, false);
        app->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
        app->add_option("--reps", reps, "timed repetitions")->check(CLI::Range(10, 1000000));
        app->add_option("--warmup", warmup, "discarded repetitions")->check(CLI::Range(3, 1000));
        app->callback([this] { run(); });
    }

    void run() {
        RunConfig cfg = common.resolve();
        const Denoiser model = load_checkpoint(checkpoint);
        SuiteSpec one;
        one.seed = cfg.eval_suite.seed;
        one.counts = {{ScenarioKind::u_turn, 1}};
        const Scenario sc = generate_suite(one).front();

        struct Row {
            std::string name;
            LatencyReport rep;
        };
        std::vector<Row> rows;
        RunConfig always = cfg, never = cfg;
        always.reflection.gamma = 1.0;
        never.reflection.gamma = 0.0;
        rows.push_back({"off", bench_latency(DiffusionPlanner(model, planner_config(cfg, false)), sc.scene, reps, warmup)});
        rows.push_back({"on(gamma=0)", bench_latency(DiffusionPlanner(model, planner_config(never, true)), sc.scene, reps, warmup)});
        rows.push_back({"on(gamma=1)", bench_latency(DiffusionPlanner(model, planner_config(always, true)), sc.scene, reps, warmup)});

        const double base = rows.front().rep.per_step_mean_ms;
        std::printf("%-12s %12s %12s %12s %12s %8s %9s\n", "mode", "step_ms", "step_p95", "e2e_ms", "e2e_p95", "ratio",
                    "attempts");
        json out = json::array();
        for (const auto& r : rows) {
            const double ratio = r.rep.per_step_mean_ms / base;
            std::printf("%-12s %12.3f %12.3f %12.3f %12.3f %8.3f %9.2f\n", r.name.c_str(), r.rep.per_step_mean_ms,
                        r.rep.per_step_p95_ms, r.rep.e2e_mean_ms, r.rep.e2e_p95_ms, ratio, r.rep.mean_attempts);
            out.push_back({{"mode", r.name},
                           {"per_step_mean_ms", r.rep.per_step_mean_ms},
                           {"per_step_p95_ms", r.rep.per_step_p95_ms},
                           {"e2e_mean_ms", r.rep.e2e_mean_ms},
                           {"e2e_p95_ms", r.rep.e2e_p95_ms},
                           {"ratio", ratio},
                           {"mean_attempts", r.rep.mean_attempts},
                           {"repetitions", r.rep.repetitions}});
        }
        if (!common.out.empty()) {
            const fs::path dir = common.out;
            prepare_out(dir, {"bench.json"}, common.force);
            write_text(dir / "bench.json", out.dump(2) + "\n");
        }
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"reflex: diffusion trajectory planner with confidence-gated reflection"};
    app.require_subcommand(1);
    GenData gen;
    Train tr;
    Eval ev;
    Ablate ab;
    Bench be;
    gen.add(app);
    tr.add(app);
    ev.add(app);
    ab.add(app);
    be.add(app);
    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
