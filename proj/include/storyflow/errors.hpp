#pragma once

#include <stdexcept>
#include <string>

namespace storyflow {

// Exit-code mapping for the CLI: config 2, training 3, sampling 4.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainingDivergence : std::runtime_error {
    explicit TrainingDivergence(const std::string& msg) : std::runtime_error(msg) {}
};

struct SamplerDivergence : std::runtime_error {
    explicit SamplerDivergence(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace storyflow
