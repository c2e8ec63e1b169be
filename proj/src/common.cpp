#include <cstdio>

#include "finecount/error.hpp"
#include "finecount/grid.hpp"
#include "finecount/hash.hpp"

namespace finecount {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidSpec: return "invalid-spec";
    case ErrorKind::kInvalidArgument: return "invalid-argument";
    case ErrorKind::kInsufficientNegatives: return "insufficient-negatives";
    case ErrorKind::kExternalService: return "external-service";
    case ErrorKind::kDatasetSynthesis: return "dataset-synthesis";
    case ErrorKind::kBackend: return "backend";
    case ErrorKind::kNonFinite: return "non-finite";
    case ErrorKind::kCapability: return "capability";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kParse: return "parse";
  }
  return "unknown";
}

std::string to_string(GridShape shape) {
  return std::to_string(shape.rows) + "x" + std::to_string(shape.cols);
}

std::string to_hex(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

}  // namespace finecount
