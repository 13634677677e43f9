#include "sabone/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

namespace sabone {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "train";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw invalid_argument("unknown split '" + s + "'");
}

std::vector<ManifestEntry> DatasetManifest::select(Split split, const std::string& sequence_tag) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
        if (e.split == split && (sequence_tag.empty() || e.sequence_tag == sequence_tag)) out.push_back(e);
    return out;
}

DatasetManifest load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open manifest " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw format_error("manifest is not valid JSON: " + std::string(e.what()));
    }
    if (!j.is_array()) throw format_error("manifest must be a JSON list");
    const fs::path base = path.parent_path();
    DatasetManifest m;
    try {
        for (const auto& row : j) {
            ManifestEntry e;
            e.volume = row.at("volume").get<std::string>();
            e.mask = row.at("mask").get<std::string>();
            if (e.volume.is_relative()) e.volume = base / e.volume;
            if (e.mask.is_relative()) e.mask = base / e.mask;
            e.patient_id = row.at("patient_id").get<std::string>();
            e.location_tag = row.value("location_tag", "");
            e.sequence_tag = row.value("sequence_tag", "");
            e.split = split_from_string(row.value("split", "train"));
            m.entries.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw format_error("manifest entry: " + std::string(e.what()));
    }
    return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
    const fs::path base = fs::absolute(path).parent_path();
    auto rel = [&](const fs::path& p) {
        const auto abs = fs::absolute(p).lexically_normal();
        const auto r = abs.lexically_relative(base);
        if (!r.empty() && *r.begin() != "..") return r.generic_string();
        return abs.generic_string();
    };
    json j = json::array();
    for (const auto& e : m.entries)
        j.push_back({{"volume", rel(e.volume)},
                     {"mask", rel(e.mask)},
                     {"patient_id", e.patient_id},
                     {"location_tag", e.location_tag},
                     {"sequence_tag", e.sequence_tag},
                     {"split", to_string(e.split)}});
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw io_error("cannot write manifest " + path.string());
    out << j.dump(2) << '\n';
}

void check_patient_disjoint(const DatasetManifest& m) {
    std::map<std::string, Split> seen;
    for (const auto& e : m.entries) {
        auto [it, inserted] = seen.emplace(e.patient_id, e.split);
        if (!inserted && it->second != e.split)
            throw format_error("patient " + e.patient_id + " appears in splits " + to_string(it->second) + " and " +
                               to_string(e.split));
    }
}

DatasetManifest split_dataset(const DatasetManifest& m, std::array<double, 3> ratios, uint64_t seed) {
    const double total = ratios[0] + ratios[1] + ratios[2];
    for (double r : ratios)
        if (r < 0) throw invalid_argument("split ratios must be non-negative");
    if (std::abs(total - 1.0) > 1e-6) throw invalid_argument("split ratios must sum to 1");

    std::vector<std::string> patients;
    std::set<std::string> seen;
    for (const auto& e : m.entries)
        if (seen.insert(e.patient_id).second) patients.push_back(e.patient_id);
    std::sort(patients.begin(), patients.end());

    const auto n = static_cast<int64_t>(patients.size());
    const int64_t nonempty = std::count_if(ratios.begin(), ratios.end(), [](double r) { return r > 0; });
    if (n < nonempty)
        throw invalid_argument(std::to_string(n) + " patients cannot fill " + std::to_string(nonempty) + " splits");

    // Largest-remainder allocation, then guarantee one patient per nonempty split.
    std::array<int64_t, 3> count{};
    std::array<double, 3> rem{};
    int64_t used = 0;
    for (size_t i = 0; i < 3; ++i) {
        const double exact = ratios[i] * static_cast<double>(n);
        count[i] = static_cast<int64_t>(std::floor(exact + 1e-9));
        rem[i] = exact - static_cast<double>(count[i]);
        used += count[i];
    }
    std::array<size_t, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return rem[a] > rem[b]; });
    for (size_t k = 0; used < n; k = (k + 1) % 3)
        if (ratios[order[k]] > 0) ++count[order[k]], ++used;
    for (size_t i = 0; i < 3; ++i) {
        if (ratios[i] > 0 && count[i] == 0) {
            const auto donor = static_cast<size_t>(std::max_element(count.begin(), count.end()) - count.begin());
            --count[donor];
            ++count[i];
        }
    }

    std::mt19937_64 rng(seed);
    std::shuffle(patients.begin(), patients.end(), rng);
    std::map<std::string, Split> assign;
    size_t p = 0;
    const Split splits[3] = {Split::Train, Split::Val, Split::Test};
    for (size_t i = 0; i < 3; ++i)
        for (int64_t k = 0; k < count[i]; ++k) assign[patients[p++]] = splits[i];

    DatasetManifest out = m;
    for (auto& e : out.entries) e.split = assign.at(e.patient_id);
    check_patient_disjoint(out);
    return out;
}

std::vector<Sample> load_samples(const std::vector<ManifestEntry>& entries) {
    std::vector<Sample> out;
    out.reserve(entries.size());
    for (const auto& e : entries) {
        Sample s{e, load_volume(e.volume), load_mask(e.mask)};
        validate_pair(s.volume, s.mask);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace sabone
