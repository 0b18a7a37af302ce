#pragma once

#include <cstddef>
#include <string>

#include "bandvq/signal.hpp"

namespace bandvq {

/// A labeled recording: raw segment in microvolts plus class and subject.
struct Trial {
  EegSegment segment;
  std::size_t label = 0;
  std::string subject;

  bool operator==(const Trial&) const = default;
};

}  // namespace bandvq
