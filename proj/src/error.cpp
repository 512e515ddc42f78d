#include "sprune/error.hpp"

namespace sprune {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::geometry: return "geometry";
    case ErrorKind::statistics: return "statistics";
    case ErrorKind::label: return "label";
    case ErrorKind::contract: return "contract";
    case ErrorKind::spec: return "spec";
    case ErrorKind::config: return "config";
    case ErrorKind::generation: return "generation";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::precondition: return "precondition";
    case ErrorKind::format: return "format";
    case ErrorKind::corruption: return "corruption";
    case ErrorKind::split: return "split";
    case ErrorKind::io: return "io";
    case ErrorKind::migration: return "migration";
    case ErrorKind::degenerate_feature: return "degenerate-feature";
    case ErrorKind::training: return "training";
  }
  return "unknown";
}

}  // namespace sprune
