#pragma once

// Plain-text network description, one layer per line:
//
//   # comment (also allowed after a layer)
//   input 1 28 28          optional sample shape (without the batch axis)
//   partition 4            optional default block count
//   conv2d <in> <out> <kh> <kw> <stride>
//   linear <in> <out>
//   relu | flatten | mean_pool2d <window>
//
// Keywords are case-sensitive; blank lines are ignored.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "manpp/model.hpp"

namespace manpp {

struct ModelFile {
  std::vector<LayerSpec> layers;
  std::optional<std::size_t> partition;
  std::optional<Shape> input;

  /// Output width of the last parametric layer.
  std::size_t output_width() const;
  /// Model-file text that parses back to the same description.
  std::string to_text() const;
};

/// Throws ConfigError naming the line for unknown keywords, wrong argument
/// counts, non-numeric values or a shape chain that does not line up with
/// `input`.
ModelFile parse_model_text(std::string_view text);
ModelFile parse_model_file(const std::filesystem::path& path);

}  // namespace manpp
