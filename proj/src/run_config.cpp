#include "reflex/run_config.hpp"

#include "json.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace reflex {
namespace {

using json = nlohmann::json;

std::string_view to_string(InjectionScale m) { return m == InjectionScale::match_ddim ? "match_ddim" : "constant"; }
std::string_view to_string(ProjectionMode m) { return m == ProjectionMode::physics ? "physics" : "identity"; }

InjectionScale parse_injection(const std::string& s) {
    if (s == "match_ddim") return InjectionScale::match_ddim;
    if (s == "constant") return InjectionScale::constant;
    throw InvalidArgument("unknown injection scale '" + s + "'");
}

ProjectionMode parse_projection(const std::string& s) {
    if (s == "physics") return ProjectionMode::physics;
    if (s == "identity") return ProjectionMode::identity;
    throw InvalidArgument("unknown projection '" + s + "'");
}

json suite_json(const SuiteSpec& s) {
    json counts = json::object();
    for (const auto& [kind, n] : s.counts) counts[std::string(to_string(kind))] = n;
    return {{"counts", counts}, {"seed", s.seed}};
}

/// Reads the keys of `j` into fields, rejecting anything not listed.
class Reader {
public:
    Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw InvalidArgument(where_ + ": expected an object");
    }
    ~Reader() noexcept(false) {
        if (std::uncaught_exceptions()) return;
        for (const auto& [key, _] : j_.items())
            if (!seen_.count(key)) throw InvalidArgument(where_ + ": unknown key '" + key + "'");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw InvalidArgument(where_ + "." + key + ": " + e.what());
        }
    }
    const json* child(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

void read_suite(const json& j, SuiteSpec& s, const std::string& where) {
    Reader r(j, where);
    if (const json* c = r.child("counts")) {
        if (!c->is_object()) throw InvalidArgument(where + ".counts: expected an object");
        s.counts.clear();
        for (const auto& [name, n] : c->items()) s.counts[parse_kind(name)] = n.get<int>();
    }
    r.get("seed", s.seed);
}

}  // namespace

void RunConfig::validate() const {
    train.validate();
    sampler.validate();
    reflection.validate();
    confidence.validate();
    rollout.validate();
    if (workers < 1) throw InvalidArgument("workers must be >= 1");
    if (out_dir.empty()) throw InvalidArgument("out_dir must not be empty");
    for (const SuiteSpec* s : {&data_suite, &eval_suite})
        for (const auto& [kind, n] : s->counts)
            if (n < 0) throw InvalidArgument("suite count for " + std::string(to_string(kind)) + " is negative");
}

RunConfig default_run_config() {
    RunConfig cfg;
    cfg.data_suite.counts = {{ScenarioKind::u_turn, 400},
                             {ScenarioKind::sharp_curve, 250},
                             {ScenarioKind::gentle_curve, 200},
                             {ScenarioKind::straight, 150}};
    cfg.eval_suite.counts = {{ScenarioKind::u_turn, 25}, {ScenarioKind::sharp_curve, 25}};
    derive_seeds(cfg);
    return cfg;
}

void derive_seeds(RunConfig& cfg) {
    cfg.data_suite.seed = mix_seed(cfg.seed, 1);
    cfg.eval_suite.seed = mix_seed(cfg.seed, 2);
    cfg.train.seed = mix_seed(cfg.seed, 3);
    cfg.train.model.seed = mix_seed(cfg.seed, 4);
    cfg.sampler.seed = mix_seed(cfg.seed, 5);
    cfg.rollout.seed = mix_seed(cfg.seed, 6);
}

std::optional<std::uint64_t> apply_env_seed(RunConfig& cfg) {
    const char* env = std::getenv("REFLEX_SEED");
    if (!env || !*env) return std::nullopt;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0') throw InvalidArgument(std::string("REFLEX_SEED is not an unsigned integer: ") + env);
    cfg.seed = v;
    derive_seeds(cfg);
    return v;
}

std::string suite_to_string(const SuiteSpec& suite) {
    std::string out;
    for (const auto& [kind, n] : suite.counts) {
        if (!out.empty()) out += ',';
        out += std::string(to_string(kind)) + ':' + std::to_string(n);
    }
    return out;
}

PlannerConfig planner_config(const RunConfig& cfg, std::optional<bool> reflection) {
    PlannerConfig p;
    p.sample.sampler = cfg.sampler;
    if (reflection.value_or(cfg.reflection_enabled)) p.sample.reflection = cfg.reflection;
    p.constants = cfg.confidence;
    return p;
}

std::string file_digest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

std::string to_json_string(const RunConfig& c, int indent) {
    const DenoiserSpec& m = c.train.model;
    json j;
    j["seed"] = c.seed;
    j["workers"] = c.workers;
    j["out_dir"] = c.out_dir;
    j["model"] = {{"agents", m.shape.agents},
                  {"d_model", m.shape.d_model},
                  {"time_features", m.shape.time_features},
                  {"parameterization", std::string(to_string(m.parameterization))},
                  {"T", m.T},
                  {"beta_min", m.beta_min},
                  {"beta_max", m.beta_max},
                  {"snr_clip", m.snr_clip},
                  {"seed", m.seed}};
    j["train"] = {{"p_drop", c.train.p_drop},
                  {"batch", c.train.batch},
                  {"steps", c.train.steps},
                  {"learning_rate", c.train.learning_rate},
                  {"final_lr_ratio", c.train.final_lr_ratio},
                  {"optimizer", std::string(to_string(c.train.optimizer))},
                  {"momentum", c.train.momentum},
                  {"beta2", c.train.beta2},
                  {"grad_clip", c.train.grad_clip},
                  {"warmup_steps", c.train.warmup_steps},
                  {"spectral_floor", c.train.spectral_floor},
                  {"seed", c.train.seed}};
    j["sampler"] = {{"kind", std::string(to_string(c.sampler.kind))},
                    {"lambda1", c.sampler.lambda1},
                    {"steps", c.sampler.steps},
                    {"seed", c.sampler.seed}};
    j["reflection"] = {{"enabled", c.reflection_enabled},
                       {"gamma", c.reflection.gamma},
                       {"lambda2", c.reflection.lambda2},
                       {"r_max", c.reflection.r_max},
                       {"b_mode", std::string(to_string(c.reflection.b_mode))},
                       {"b", c.reflection.b},
                       {"projection", std::string(to_string(c.reflection.projection))}};
    const ConfidenceConstants& k = c.confidence;
    j["confidence"] = {{"m1", k.m1},           {"m2", k.m2},
                       {"j_max", k.j_max},     {"d_safe", k.d_safe},
                       {"d_max", k.d_max},     {"ttc_cap", k.ttc_cap},
                       {"ttc_buffer", k.ttc_buffer}, {"ttc_mid", k.ttc_mid},
                       {"ttc_width", k.ttc_width}, {"kappa_floor", k.kappa_floor}};
    const RolloutConfig& r = c.rollout;
    j["rollout"] = {{"replan_interval", r.replan_interval},
                    {"horizon", r.horizon},
                    {"seed", r.seed},
                    {"stall_window", r.stall_window},
                    {"stall_distance", r.stall_distance},
                    {"j_max", r.j_max},
                    {"a_comfort", r.a_comfort},
                    {"ego_length", r.ego_length},
                    {"ego_width", r.ego_width}};
    j["data_suite"] = suite_json(c.data_suite);
    j["eval_suite"] = suite_json(c.eval_suite);
    return j.dump(indent);
}

RunConfig parse_run_config(const std::string& text, const RunConfig& base) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw InvalidArgument(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig c = base;
    {
        Reader r(j, "config");
        r.get("seed", c.seed);
        if (j.contains("seed")) derive_seeds(c);
        r.get("workers", c.workers);
        r.get("out_dir", c.out_dir);
        if (const json* m = r.child("model")) {
            DenoiserSpec& s = c.train.model;
            Reader mr(*m, "model");
            std::string p(to_string(s.parameterization));
            mr.get("agents", s.shape.agents);
            mr.get("d_model", s.shape.d_model);
            mr.get("time_features", s.shape.time_features);
            mr.get("parameterization", p);
            mr.get("T", s.T);
            mr.get("beta_min", s.beta_min);
            mr.get("beta_max", s.beta_max);
            mr.get("snr_clip", s.snr_clip);
            mr.get("seed", s.seed);
            s.parameterization = parse_parameterization(p);
        }
        if (const json* t = r.child("train")) {
            Reader tr(*t, "train");
            std::string opt(to_string(c.train.optimizer));
            tr.get("p_drop", c.train.p_drop);
            tr.get("batch", c.train.batch);
            tr.get("steps", c.train.steps);
            tr.get("learning_rate", c.train.learning_rate);
            tr.get("final_lr_ratio", c.train.final_lr_ratio);
            tr.get("optimizer", opt);
            tr.get("momentum", c.train.momentum);
            tr.get("beta2", c.train.beta2);
            tr.get("grad_clip", c.train.grad_clip);
            tr.get("warmup_steps", c.train.warmup_steps);
            tr.get("spectral_floor", c.train.spectral_floor);
            tr.get("seed", c.train.seed);
            c.train.optimizer = parse_optimizer(opt);
        }
        if (const json* s = r.child("sampler")) {
            Reader sr(*s, "sampler");
            std::string kind(to_string(c.sampler.kind));
            sr.get("kind", kind);
            sr.get("lambda1", c.sampler.lambda1);
            sr.get("steps", c.sampler.steps);
            sr.get("seed", c.sampler.seed);
            c.sampler.kind = parse_sampler(kind);
        }
        if (const json* f = r.child("reflection")) {
            Reader fr(*f, "reflection");
            std::string b_mode(to_string(c.reflection.b_mode)), proj(to_string(c.reflection.projection));
            fr.get("enabled", c.reflection_enabled);
            fr.get("gamma", c.reflection.gamma);
            fr.get("lambda2", c.reflection.lambda2);
            fr.get("r_max", c.reflection.r_max);
            fr.get("b_mode", b_mode);
            fr.get("b", c.reflection.b);
            fr.get("projection", proj);
            c.reflection.b_mode = parse_injection(b_mode);
            c.reflection.projection = parse_projection(proj);
        }
        if (const json* k = r.child("confidence")) {
            Reader kr(*k, "confidence");
            ConfidenceConstants& cc = c.confidence;
            kr.get("m1", cc.m1);
            kr.get("m2", cc.m2);
            kr.get("j_max", cc.j_max);
            kr.get("d_safe", cc.d_safe);
            kr.get("d_max", cc.d_max);
            kr.get("ttc_cap", cc.ttc_cap);
            kr.get("ttc_buffer", cc.ttc_buffer);
            kr.get("ttc_mid", cc.ttc_mid);
            kr.get("ttc_width", cc.ttc_width);
            kr.get("kappa_floor", cc.kappa_floor);
        }
        if (const json* o = r.child("rollout")) {
            Reader orr(*o, "rollout");
            RolloutConfig& rc = c.rollout;
            orr.get("replan_interval", rc.replan_interval);
            orr.get("horizon", rc.horizon);
            orr.get("seed", rc.seed);
            orr.get("stall_window", rc.stall_window);
            orr.get("stall_distance", rc.stall_distance);
            orr.get("j_max", rc.j_max);
            orr.get("a_comfort", rc.a_comfort);
            orr.get("ego_length", rc.ego_length);
            orr.get("ego_width", rc.ego_width);
        }
        if (const json* s = r.child("data_suite")) read_suite(*s, c.data_suite, "data_suite");
        if (const json* s = r.child("eval_suite")) read_suite(*s, c.eval_suite, "eval_suite");
    }
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base) {
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str(), base);
}

}  // namespace reflex
