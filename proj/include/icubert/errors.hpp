#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace icubert {

// Every domain failure carries one of these codes; the CLI prints name(code).
enum class Errc {
    invalid_registry,
    parse_error,
    io_error,
    invalid_ratios,
    empty_train_split,
    empty_stay,
    statics_overflow,
    cache_miss,
    non_finite_value,
    index_out_of_range,
    no_eligible_tokens,
    shape_mismatch,
    mode_mismatch,
    grad_mismatch,
    format_error,
    config_mismatch,
    no_masked_slots,
    unknown_task,
    diverged_loss,
    missing_labels,
    degenerate_labels,
    invalid_spec,
    invalid_token,
};

std::string_view name(Errc code) noexcept;

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& reason)
        : std::runtime_error(reason), code_(code), reason_(reason) {}

    Errc code() const noexcept { return code_; }
    const std::string& reason() const noexcept { return reason_; }

private:
    Errc code_;
    std::string reason_;
};

class ParseError : public Error {
public:
    ParseError(std::size_t line_no, const std::string& reason)
        : Error(Errc::parse_error, "line " + std::to_string(line_no) + ": " + reason),
          line_no_(line_no),
          detail_(reason) {}

    std::size_t line_no() const noexcept { return line_no_; }
    const std::string& detail() const noexcept { return detail_; }

private:
    std::size_t line_no_;
    std::string detail_;
};

class GradMismatch : public Error {
public:
    GradMismatch(const std::string& param, double rel_err)
        : Error(Errc::grad_mismatch,
                "gradient mismatch in " + param + " (rel err " + std::to_string(rel_err) + ")"),
          param_(param),
          rel_err_(rel_err) {}

    const std::string& param() const noexcept { return param_; }
    double rel_err() const noexcept { return rel_err_; }

private:
    std::string param_;
    double rel_err_;
};

}  // namespace icubert
