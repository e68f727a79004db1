#include "manpp/model_file.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "manpp/errors.hpp"

namespace manpp {

namespace {

std::vector<std::string> tokens(const std::string& line) {
  std::istringstream is(line.substr(0, line.find('#')));
  std::vector<std::string> out;
  for (std::string t; is >> t;) out.push_back(t);
  return out;
}

std::size_t number(const std::string& tok, std::size_t line) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc{} || ptr != tok.data() + tok.size() || v == 0) {
    throw ConfigError("model line " + std::to_string(line) + ": expected a positive integer, got '" + tok + "'");
  }
  return v;
}

}  // namespace

std::size_t ModelFile::output_width() const {
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    if (it->parametric()) return it->out;
  }
  throw ConfigError("model has no parametric layer");
}

std::string ModelFile::to_text() const {
  std::ostringstream os;
  if (input) {
    os << "input";
    for (auto d : *input) os << ' ' << d;
    os << '\n';
  }
  if (partition) os << "partition " << *partition << '\n';
  for (const auto& l : layers) os << l.describe() << '\n';
  return os.str();
}

ModelFile parse_model_text(std::string_view text) {
  ModelFile mf;
  std::istringstream is{std::string(text)};
  std::size_t lineno = 0;
  std::vector<std::size_t> layer_lines;
  for (std::string line; std::getline(is, line);) {
    ++lineno;
    const auto t = tokens(line);
    if (t.empty()) continue;
    auto args = [&](std::size_t n) {
      if (t.size() != n + 1) {
        throw ConfigError("model line " + std::to_string(lineno) + ": '" + t[0] + "' takes " + std::to_string(n) +
                          " argument(s), got " + std::to_string(t.size() - 1));
      }
    };
    const auto& kw = t[0];
    try {
      if (kw == "input") {
        if (t.size() < 2) throw ConfigError("model line " + std::to_string(lineno) + ": 'input' needs a shape");
        Shape s;
        for (std::size_t i = 1; i < t.size(); ++i) s.push_back(number(t[i], lineno));
        mf.input = s;
      } else if (kw == "partition") {
        args(1);
        mf.partition = number(t[1], lineno);
      } else if (kw == "linear") {
        args(2);
        mf.layers.push_back(LayerSpec::linear(number(t[1], lineno), number(t[2], lineno)));
      } else if (kw == "conv2d") {
        args(5);
        mf.layers.push_back(LayerSpec::conv2d(number(t[1], lineno), number(t[2], lineno), number(t[3], lineno),
                                              number(t[4], lineno), number(t[5], lineno)));
      } else if (kw == "relu") {
        args(0);
        mf.layers.push_back(LayerSpec::relu());
      } else if (kw == "flatten") {
        args(0);
        mf.layers.push_back(LayerSpec::flatten());
      } else if (kw == "mean_pool2d") {
        args(1);
        mf.layers.push_back(LayerSpec::mean_pool2d(number(t[1], lineno)));
      } else {
        throw ConfigError("model line " + std::to_string(lineno) + ": unknown keyword '" + kw + "'");
      }
      if (layer_lines.size() < mf.layers.size()) layer_lines.push_back(lineno);
    } catch (const ShapeError& e) {
      throw ConfigError("model line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (mf.layers.empty()) throw ConfigError("model file declares no layers");
  if (mf.input) {
    Shape s{1};
    s.insert(s.end(), mf.input->begin(), mf.input->end());
    for (std::size_t i = 0; i < mf.layers.size(); ++i) {
      try {
        s = mf.layers[i].output_shape(s);
      } catch (const ShapeError& e) {
        throw ConfigError("model line " + std::to_string(layer_lines[i]) + ": layer does not fit the input shape: " +
                          e.what());
      }
    }
  }
  return mf;
}

ModelFile parse_model_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open model file " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_model_text(os.str());
}

}  // namespace manpp
