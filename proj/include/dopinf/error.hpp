#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dopinf {

enum class Errc {
  invalid_argument,
  invalid_partition,
  io,
  corrupt_dataset,
  shape_mismatch,
  singular_lift,
  degenerate_variable,
  collective_contract,
  transport,
  asymmetric_matrix,
  zero_spectrum,
  underdetermined,
  singular_system,
  no_feasible_pair,
  cfl_violation,
  divergent_draw,
  probe_out_of_range,
  missing_params,
};

std::string_view errc_name(Errc code) noexcept;

/// Error category used by the command line front end to pick an exit status.
enum class ErrorClass { usage, numerical, io, runtime };

ErrorClass classify(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace dopinf
