#include "iert/error.hpp"

namespace iert {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "config_error";
    case ErrorKind::kShape: return "shape_error";
    case ErrorKind::kBounds: return "bounds_error";
    case ErrorKind::kContract: return "contract_violation";
    case ErrorKind::kCorruptCheckpoint: return "corrupt_checkpoint";
    case ErrorKind::kEmptyCorpus: return "empty_corpus";
    case ErrorKind::kSampling: return "sampling_error";
    case ErrorKind::kValidation: return "validation_error";
    case ErrorKind::kNonFinite: return "non_finite_loss";
    case ErrorKind::kIo: return "io_error";
    case ErrorKind::kNonDeterministic: return "non_deterministic_loss";
  }
  return "unknown_error";
}

}  // namespace iert
