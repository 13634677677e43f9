#include "sabone/rle.hpp"

#include <nlohmann/json.hpp>

#include "sabone/error.hpp"

namespace sabone {

Rle rle_encode(std::span<const uint8_t> mask) {
    Rle runs;
    const auto n = static_cast<int64_t>(mask.size());
    for (int64_t i = 0; i < n;) {
        if (!mask[static_cast<size_t>(i)]) {
            ++i;
            continue;
        }
        const int64_t start = i;
        while (i < n && mask[static_cast<size_t>(i)]) ++i;
        runs.emplace_back(start, i - start);
    }
    return runs;
}

std::vector<uint8_t> rle_decode(const Rle& runs, int64_t size) {
    if (size < 0) throw invalid_argument("negative mask size");
    std::vector<uint8_t> out(static_cast<size_t>(size), 0);
    int64_t end = 0;
    for (const auto& [start, len] : runs) {
        if (start < end || len < 1 || start + len > size) throw format_error("invalid RLE run");
        std::fill_n(out.begin() + start, len, uint8_t{1});
        end = start + len;
    }
    return out;
}

nlohmann::json rle_to_json(const Rle& runs) {
    auto j = nlohmann::json::array();
    for (const auto& [s, l] : runs) j.push_back({s, l});
    return j;
}

Rle rle_from_json(const nlohmann::json& j) {
    Rle runs;
    try {
        for (const auto& r : j) runs.emplace_back(r.at(0).get<int64_t>(), r.at(1).get<int64_t>());
    } catch (const nlohmann::json::exception& e) {
        throw format_error(std::string("malformed RLE: ") + e.what());
    }
    return runs;
}

}  // namespace sabone
