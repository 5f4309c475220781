#pragma once

#include <span>
#include <string>
#include <vector>

#include "solarfuse/data.hpp"

namespace solarfuse {

// Anything that maps windows to [T_out, C_ts] predictions. Implementations
// must be safe to call concurrently once constructed.
class Forecaster {
public:
    virtual ~Forecaster() = default;
    virtual std::string name() const = 0;
    virtual std::vector<Tensor> predict(std::span<const data::SampleWindow> windows) const = 0;
};

}  // namespace solarfuse
