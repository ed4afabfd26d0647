#pragma once

#include <cstdio>
#include <filesystem>
#include <string>

#include <unistd.h>

#include <doctest.h>

#include "icubert/errors.hpp"
#include "icubert/types.hpp"

namespace test {

// Runs `f` and checks it throws icubert::Error with the given code.
template <typename F>
void check_errc(F&& f, icubert::Errc code) {
    bool thrown = false;
    try {
        f();
    } catch (const icubert::Error& e) {
        thrown = true;
        CHECK_MESSAGE(e.code() == code, "got " << icubert::name(e.code()) << ": " << e.what());
    }
    CHECK_MESSAGE(thrown, "expected " << icubert::name(code));
}

inline icubert::Registry reg(std::string patient, std::string stay, std::string variable, icubert::RecordValue value,
                             std::int64_t minute, std::int64_t duration = 0, bool is_static = false,
                             std::string source = "chartevents") {
    icubert::Registry r;
    r.patient_id = std::move(patient);
    r.stay_id = std::move(stay);
    r.source = std::move(source);
    r.variable = std::move(variable);
    r.value = std::move(value);
    r.timestamp = *icubert::parse_timestamp("2150-01-01T00:00") + minute;
    r.duration_minutes = duration;
    r.is_static = is_static;
    return r;
}

class TempDir {
public:
    TempDir() {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("icubert_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

}  // namespace test
