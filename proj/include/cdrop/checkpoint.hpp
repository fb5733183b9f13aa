#pragma once

#include <string>

#include "cdrop/layers.hpp"

namespace cdrop {

// Versioned little-endian binary snapshot of a model: layer shapes and
// activations, weights, biases, p_logits, temperatures, regularisation
// coefficients, the heteroscedastic flag and log_tau. Round-trips bit-exactly.
void save_checkpoint(const Mlp& model, const std::string& path);

// Raises FormatError for a bad magic, unsupported version or truncated or
// inconsistent payload; DataError when the file cannot be opened.
Mlp load_checkpoint(const std::string& path);

}  // namespace cdrop
