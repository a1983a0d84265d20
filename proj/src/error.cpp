#include "dale/error.hpp"

namespace dale {

const char *to_string(Errc code) noexcept {
  switch (code) {
  case Errc::NonSymmetric: return "NonSymmetric";
  case Errc::NonConvergent: return "NonConvergent";
  case Errc::NotScalarLoss: return "NotScalarLoss";
  case Errc::DetachedNode: return "DetachedNode";
  case Errc::BadRange: return "BadRange";
  case Errc::NonFinite: return "NonFinite";
  case Errc::ShapeMismatch: return "ShapeMismatch";
  case Errc::BadDims: return "BadDims";
  case Errc::BadMagic: return "BadMagic";
  case Errc::TruncatedFile: return "TruncatedFile";
  case Errc::BadMaxval: return "BadMaxval";
  case Errc::Io: return "Io";
  case Errc::EmptyPatch: return "EmptyPatch";
  case Errc::BadPatchSize: return "BadPatchSize";
  case Errc::UninitializedGradient: return "UninitializedGradient";
  case Errc::DegenerateClass: return "DegenerateClass";
  case Errc::EmptyRegionSet: return "EmptyRegionSet";
  case Errc::EmptySplit: return "EmptySplit";
  case Errc::BadConfig: return "BadConfig";
  }
  return "Unknown";
}

Error::Error(Errc code, const std::string &what)
    : std::runtime_error(std::string(to_string(code)) + ": " + what),
      code_(code) {}

} // namespace dale
