#include "dopinf/error.hpp"

namespace dopinf {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::invalid_argument: return "invalid-argument";
    case Errc::invalid_partition: return "invalid-partition";
    case Errc::io: return "io";
    case Errc::corrupt_dataset: return "corrupt-dataset";
    case Errc::shape_mismatch: return "shape-mismatch";
    case Errc::singular_lift: return "singular-lift";
    case Errc::degenerate_variable: return "degenerate-variable";
    case Errc::collective_contract: return "collective-contract";
    case Errc::transport: return "transport";
    case Errc::asymmetric_matrix: return "asymmetric-matrix";
    case Errc::zero_spectrum: return "zero-spectrum";
    case Errc::underdetermined: return "underdetermined";
    case Errc::singular_system: return "singular-system";
    case Errc::no_feasible_pair: return "no-feasible-pair";
    case Errc::cfl_violation: return "cfl-violation";
    case Errc::divergent_draw: return "divergent-draw";
    case Errc::probe_out_of_range: return "probe-out-of-range";
    case Errc::missing_params: return "missing-params";
  }
  return "unknown";
}

ErrorClass classify(Errc code) noexcept {
  switch (code) {
    case Errc::invalid_argument:
    case Errc::invalid_partition:
    case Errc::probe_out_of_range:
      return ErrorClass::usage;
    case Errc::io:
    case Errc::corrupt_dataset:
    case Errc::missing_params:
      return ErrorClass::io;
    case Errc::singular_lift:
    case Errc::degenerate_variable:
    case Errc::asymmetric_matrix:
    case Errc::zero_spectrum:
    case Errc::underdetermined:
    case Errc::singular_system:
    case Errc::no_feasible_pair:
    case Errc::cfl_violation:
    case Errc::divergent_draw:
    case Errc::shape_mismatch:
      return ErrorClass::numerical;
    case Errc::collective_contract:
    case Errc::transport:
      return ErrorClass::runtime;
  }
  return ErrorClass::runtime;
}

}  // namespace dopinf
