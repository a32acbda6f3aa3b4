#include "reflex/dataset.hpp"

#include "json.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace reflex {

using json = nlohmann::json;

int SuiteSpec::total() const {
    int n = 0;
    for (const auto& [kind, count] : counts) n += count;
    return n;
}

SuiteSpec SuiteSpec::parse(const std::string& text, std::uint64_t seed) {
    SuiteSpec out;
    out.seed = seed;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw InvalidArgument("suite entry '" + item + "' must be kind:count");
        const ScenarioKind kind = parse_kind(item.substr(0, colon));
        int count = 0;
        try {
            count = std::stoi(item.substr(colon + 1));
        } catch (const std::exception&) {
            throw InvalidArgument("suite entry '" + item + "' has a bad count");
        }
        if (count < 0) throw InvalidArgument("suite entry '" + item + "' has a negative count");
        out.counts[kind] += count;
    }
    return out;
}

std::vector<Scenario> generate_suite(const SuiteSpec& suite) {
    std::vector<Scenario> out;
    out.reserve(static_cast<std::size_t>(suite.total()));
    std::uint64_t index = 0;
    for (const ScenarioKind kind : kAllKinds) {
        const auto it = suite.counts.find(kind);
        if (it == suite.counts.end()) continue;
        for (int i = 0; i < it->second; ++i) out.push_back(generate_scenario(kind, mix_seed(suite.seed, index++)));
    }
    return out;
}

SuiteSpec split_suite(const std::map<ScenarioKind, double>& fractions, int total, std::uint64_t seed) {
    double sum = 0.0;
    for (const auto& [k, f] : fractions) {
        if (!(f >= 0.0)) throw InvalidArgument("split_suite: negative fraction");
        sum += f;
    }
    if (!(sum > 0.0)) throw InvalidArgument("split_suite: fractions sum to zero");
    SuiteSpec out;
    out.seed = seed;
    std::vector<std::pair<double, ScenarioKind>> remainders;
    int assigned = 0;
    for (const auto& [k, f] : fractions) {
        const double exact = total * f / sum;
        const int n = static_cast<int>(std::floor(exact));
        out.counts[k] = n;
        assigned += n;
        remainders.emplace_back(exact - n, k);
    }
    std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < total; ++i, ++assigned) out.counts[remainders[i % remainders.size()].second] += 1;
    return out;
}

// ---------------------------------------------------------------- road json

namespace {

json road_json(const RoadSpec& road) {
    json segs = json::array();
    for (const auto& seg : road.segments) {
        if (const auto* s = std::get_if<Straight>(&seg))
            segs.push_back({{"type", "straight"}, {"length", s->length}});
        else {
            const auto& a = std::get<Arc>(seg);
            segs.push_back({{"type", "arc"}, {"radius", a.radius}, {"sweep", a.sweep}});
        }
    }
    return {{"segments", segs},
            {"lane_half_width", road.lane_half_width},
            {"speed_limit", road.speed_limit},
            {"origin", {road.origin.x, road.origin.y, road.origin.theta}}};
}

RoadSpec road_from(const json& j) {
    RoadSpec road;
    for (const auto& s : j.at("segments")) {
        const std::string type = s.at("type").get<std::string>();
        if (type == "straight")
            road.segments.emplace_back(Straight{s.at("length").get<double>()});
        else if (type == "arc")
            road.segments.emplace_back(Arc{s.at("radius").get<double>(), s.at("sweep").get<double>()});
        else
            throw InvalidArgument("road: unknown segment type '" + type + "'");
    }
    road.lane_half_width = j.at("lane_half_width").get<double>();
    road.speed_limit = j.at("speed_limit").get<double>();
    const auto& o = j.at("origin");
    road.origin = {o.at(0).get<double>(), o.at(1).get<double>(), o.at(2).get<double>()};
    road.validate();
    return road;
}

void write_f32(std::ostream& os, const double* src, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) {
        auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(src[i]));
        if constexpr (std::endian::native != std::endian::little) bits = byteswap32(bits);
        os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
}

double read_f32(const char* src) {
    std::uint32_t bits;
    std::memcpy(&bits, src, sizeof bits);
    if constexpr (std::endian::native != std::endian::little) bits = byteswap32(bits);
    return static_cast<double>(std::bit_cast<float>(bits));
}

}  // namespace

std::string road_to_json(const RoadSpec& road) { return road_json(road).dump(); }

RoadSpec road_from_json(const std::string& text) { return road_from(json::parse(text)); }

// ---------------------------------------------------------------- files

void write_dataset(const std::filesystem::path& dir, const std::vector<Scenario>& scenarios, bool force) {
    namespace fs = std::filesystem;
    const fs::path manifest = dir / "manifest.jsonl";
    const fs::path payload = dir / "payload.f32";
    if (!force && (fs::exists(manifest) || fs::exists(payload)))
        throw InvalidArgument("dataset already exists in " + dir.string() + " (use --force to overwrite)");
    fs::create_directories(dir);

    std::ofstream mf(manifest, std::ios::trunc);
    std::ofstream pf(payload, std::ios::binary | std::ios::trunc);
    if (!mf || !pf) throw std::runtime_error("cannot write dataset into " + dir.string());

    std::uint64_t offset = 0;
    for (const auto& sc : scenarios) {
        const Trajectory local = transform(sc.ground_truth, ego_frame(sc.scene).inverse());
        const ConditionSet cs = assemble_conditions(sc.scene);
        const bool high = classify_high_lat(agent_row(sc.ground_truth, 0)).high_lat;

        json line = {{"kind", std::string(to_string(sc.kind))},
                     {"seed", sc.seed},
                     {"road", road_json(sc.scene.road)},
                     {"high_lat", high},
                     {"agents", local.agents()},
                     {"steps", local.steps()},
                     {"trajectory_offset", offset}};
        write_f32(pf, local.data().data(), local.size());
        offset += static_cast<std::uint64_t>(local.size()) * 4;
        line["conditions_offset"] = offset;
        line["condition_dim"] = cs.full.size();
        write_f32(pf, cs.full.data(), cs.full.size());
        write_f32(pf, cs.decouple.data(), cs.decouple.size());
        offset += static_cast<std::uint64_t>(cs.full.size()) * 8;
        mf << line.dump() << '\n';
    }
    if (!mf || !pf) throw std::runtime_error("write failed in " + dir.string());
}

std::vector<DatasetEntry> read_dataset(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.jsonl");
    std::ifstream pf(dir / "payload.f32", std::ios::binary);
    if (!mf || !pf) throw InvalidArgument("no dataset found in " + dir.string());
    const std::string bytes((std::istreambuf_iterator<char>(pf)), std::istreambuf_iterator<char>());

    std::vector<DatasetEntry> out;
    std::string text;
    int line_no = 0;
    while (std::getline(mf, text)) {
        ++line_no;
        if (text.empty()) continue;
        const json j = json::parse(text);
        DatasetEntry e;
        e.record.kind = parse_kind(j.at("kind").get<std::string>());
        e.record.seed = j.at("seed").get<std::uint64_t>();
        e.record.road = road_from(j.at("road"));
        e.record.high_lat = j.at("high_lat").get<bool>();
        e.record.agents = j.at("agents").get<int>();
        e.record.trajectory_offset = j.at("trajectory_offset").get<std::uint64_t>();
        e.record.conditions_offset = j.at("conditions_offset").get<std::uint64_t>();
        const int steps = j.at("steps").get<int>();
        const int cdim = j.at("condition_dim").get<int>();
        if (cdim != ConditionLayout::size())
            throw InvalidArgument("dataset line " + std::to_string(line_no) + ": condition length " + std::to_string(cdim) +
                                  ", expected " + std::to_string(ConditionLayout::size()));

        const std::uint64_t n_traj = static_cast<std::uint64_t>(e.record.agents) * steps * kChannels;
        if (e.record.trajectory_offset + n_traj * 4 > bytes.size() || e.record.conditions_offset + 8ull * cdim > bytes.size())
            throw InvalidArgument("dataset line " + std::to_string(line_no) + ": payload truncated");
        e.future = Trajectory(e.record.agents, steps);
        for (std::uint64_t i = 0; i < n_traj; ++i)
            e.future.data().data()[i] = read_f32(bytes.data() + e.record.trajectory_offset + 4 * i);
        e.conditions.full.resize(cdim);
        e.conditions.decouple.resize(cdim);
        for (int i = 0; i < cdim; ++i) {
            e.conditions.full[i] = read_f32(bytes.data() + e.record.conditions_offset + 4ull * i);
            e.conditions.decouple[i] = read_f32(bytes.data() + e.record.conditions_offset + 4ull * (cdim + i));
        }
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<TrainingExample> to_examples(const std::vector<DatasetEntry>& entries, int agents) {
    std::vector<TrainingExample> out;
    out.reserve(entries.size());
    for (const auto& e : entries) {
        TrainingExample ex;
        ex.x0 = Trajectory(agents, e.future.steps(), e.future.dt());
        const int rows = std::min(agents, e.future.agents());
        ex.x0.data().topRows(rows) = e.future.data().topRows(rows);
        ex.conditions = e.conditions;
        out.push_back(std::move(ex));
    }
    return out;
}

double high_lat_fraction(const std::vector<DatasetEntry>& entries) {
    if (entries.empty()) return 0.0;
    const auto n = std::count_if(entries.begin(), entries.end(), [](const DatasetEntry& e) { return e.record.high_lat; });
    return static_cast<double>(n) / static_cast<double>(entries.size());
}

}  // namespace reflex
