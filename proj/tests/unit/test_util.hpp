#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "sabone/log.hpp"

namespace sabone::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("sabone-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline void quiet_logs() { log::set_min_level(log::Level::Error); }

}  // namespace sabone::testing

#define EXPECT_ERROR_KIND(stmt, k)                                      \
    do {                                                                \
        try {                                                           \
            stmt;                                                       \
            ADD_FAILURE() << "expected sabone::Error from " #stmt;      \
        } catch (const ::sabone::Error& e_) {                           \
            EXPECT_EQ(e_.kind(), ::sabone::Error::Kind::k) << e_.what(); \
        }                                                               \
    } while (0)
