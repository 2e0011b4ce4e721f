#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "recurformer/cache_accounting.hpp"
#include "recurformer/model.hpp"
#include "recurformer/training.hpp"

namespace py = pybind11;
using namespace rfm;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  Shape shape;
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(a.shape(i));
  std::vector<double> data(a.data(), a.data() + a.size());
  return Tensor::from_data(shape, std::move(data));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
  return out;
}

// Standalone selective-SSM block with seeded parameters and both execution
// modes, mirroring the C++ surface.
class PyMambaBlock {
 public:
  PyMambaBlock(i64 d_model_in, u64 seed, double k_epd, i64 d_conv, i64 d_state)
      : cfg_{d_model_in, k_epd, d_conv, d_state, 0} {
    Rng rng(seed);
    params_ = MambaParams::init(cfg_, rng, false);
    state_ = MambaState::zeros(params_);
  }

  py::array_t<double> forward_parallel(
      const py::array_t<double, py::array::c_style | py::array::forcecast>& v) {
    NoGradGuard ng;
    return array_from_tensor(mamba_forward_parallel(tensor_from_array(v), params_));
  }

  py::array_t<double> step(
      const py::array_t<double, py::array::c_style | py::array::forcecast>& v) {
    if (v.ndim() != 1) throw shape_error("step expects a 1-d row");
    std::vector<double> row(v.data(), v.data() + v.size());
    const auto y = mamba_step(row, params_, state_);
    py::array_t<double> out(static_cast<py::ssize_t>(y.size()));
    std::copy(y.begin(), y.end(), out.mutable_data());
    return out;
  }

  void reset() { state_ = MambaState::zeros(params_); }
  i64 state_element_count() const { return state_.element_count(); }

 private:
  MambaConfig cfg_;
  MambaParams params_;
  MambaState state_;
};

class PyModel {
 public:
  explicit PyModel(Model m) : m_(std::move(m)) {}

  static PyModel random(i64 n_layers, i64 d_model, i64 n_heads, i64 n_kv_heads,
                        i64 vocab_size, double beta, u64 seed) {
    ModelConfig cfg;
    cfg.n_layers = n_layers;
    cfg.attention = {d_model, n_heads, n_kv_heads, 10000.0};
    cfg.vocab_size = vocab_size;
    return PyModel(
        Model::random(cfg, HeadAssignment::per_layer_prefix(n_layers, n_heads, beta), seed));
  }

  static PyModel load(const std::string& dir) { return PyModel(load_model(dir)); }
  void save(const std::string& dir) const { save_model(m_, dir); }

  py::array_t<double> logits(const std::vector<int>& tokens) {
    NoGradGuard ng;
    return array_from_tensor(model_forward(m_, tokens, 1, static_cast<i64>(tokens.size())));
  }

  std::vector<int> generate(const std::vector<int>& prompt, i64 n_new) {
    return greedy_generate(m_, prompt, n_new);
  }

  PyModel convert(const std::vector<i64>& ra_index, double beta, u64 seed) const {
    RecencyReport rep;
    rep.n_layers = m_.cfg.n_layers;
    rep.n_heads = m_.cfg.attention.n_heads;
    rep.n_samples = 1;
    rep.ra_index = ra_index;
    return PyModel(convert_model(m_, rep, beta, seed));
  }

  std::vector<std::tuple<i64, std::string, i64, i64>> cache_trace(i64 prefill_len,
                                                                  i64 gen_steps, u64 seed) {
    const auto stats = measured_stats(m_, prefill_len, gen_steps, PrefillMode::streaming, seed);
    std::vector<std::tuple<i64, std::string, i64, i64>> out;
    for (const auto& s : stats) {
      out.emplace_back(s.step, s.phase == Phase::prefill ? "prefill" : "generation",
                       s.attention_elements, s.mamba_elements);
    }
    return out;
  }

  std::vector<std::vector<i64>> heads_m() const {
    std::vector<std::vector<i64>> out;
    for (const auto& hs : m_.assign.heads_m) out.push_back(hs);
    return out;
  }

  i64 parameter_count() const { return m_.parameter_count(); }

 private:
  Model m_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Hybrid attention/SSM toolkit: recency analysis, head replacement, "
            "cache accounting, and synthetic recall tasks";

  py::register_exception<config_error>(m, "ConfigError");
  py::register_exception<data_error>(m, "DataError");
  py::register_exception<contract_error>(m, "ContractError");

  m.def(
      "softmax_rows",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x, double s) {
        NoGradGuard ng;
        return array_from_tensor(ops::softmax_rows(tensor_from_array(x), s));
      },
      py::arg("x"), py::arg("scale") = 1.0);

  m.def(
      "recency_ratio",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a, i64 band_k,
         bool exclude_first_token) {
        if (a.ndim() != 2 || a.shape(0) != a.shape(1)) {
          throw shape_error("recency_ratio expects a square matrix");
        }
        std::vector<double> w(a.data(), a.data() + a.size());
        return recency_ratio(w, a.shape(0), RRConfig{band_k, 0.8, exclude_first_token});
      },
      py::arg("weights"), py::arg("band_k"), py::arg("exclude_first_token") = true);

  m.def(
      "mamba_state_element_count",
      [](i64 d_model_in, double k_epd, i64 d_conv, i64 d_state) {
        return mamba_state_element_count(MambaConfig{d_model_in, k_epd, d_conv, d_state, 0});
      },
      py::arg("d_model_in"), py::arg("k_epd") = 2.0, py::arg("d_conv") = 4,
      py::arg("d_state") = 16);

  m.def(
      "cache_fraction",
      [](i64 n_layers, i64 n_heads, i64 n_kv_heads, i64 d_head, double beta, i64 length,
         double k_epd, i64 d_conv, i64 d_state) {
        ModelConfig cfg;
        cfg.n_layers = n_layers;
        cfg.attention = {n_heads * d_head, n_heads, n_kv_heads, 10000.0};
        cfg.mamba = {k_epd, d_conv, d_state, 0};
        cfg.vocab_size = 2;
        return closed_form_fraction(
            cfg, HeadAssignment::per_layer_prefix(n_layers, n_heads, beta), length);
      },
      py::arg("n_layers"), py::arg("n_heads"), py::arg("n_kv_heads"), py::arg("d_head"),
      py::arg("beta"), py::arg("length"), py::arg("k_epd") = 2.0, py::arg("d_conv") = 4,
      py::arg("d_state") = 16);

  py::class_<HashHopInstance>(m, "HashHopInstance")
      .def_readonly("start_element", &HashHopInstance::start_element)
      .def_readonly("target_chain", &HashHopInstance::target_chain)
      .def_readonly("pairs", &HashHopInstance::pairs)
      .def("render", &HashHopInstance::render)
      .def("score", [](const HashHopInstance& inst, const std::string& output) {
        return score_hashhop(inst, output);
      });
  m.def("generate_hashhop", &generate_hashhop, py::arg("seed"), py::arg("h_e") = 8,
        py::arg("h_p") = 16, py::arg("h_l") = 6144);

  py::class_<MQARInstance>(m, "MQARInstance")
      .def_readonly("tokens", &MQARInstance::tokens)
      .def_readonly("queries", &MQARInstance::queries)
      .def_readonly("answers", &MQARInstance::answers)
      .def_readonly("query_positions", &MQARInstance::query_positions)
      .def("score", [](const MQARInstance& inst, const std::vector<int>& preds) {
        return score_mqar(inst, preds);
      });
  m.def(
      "generate_mqar",
      [](u64 seed, i64 n_pairs, i64 length, i64 n_queries, i64 key_vocab, i64 value_vocab,
         double pad_split) {
        MQARParams p;
        p.n_pairs = n_pairs;
        p.length = length;
        p.n_queries = n_queries;
        p.key_vocab = key_vocab;
        p.value_vocab = value_vocab;
        p.pad_split = pad_split;
        return generate_mqar(seed, p);
      },
      py::arg("seed"), py::arg("n_pairs"), py::arg("length"), py::arg("n_queries") = 0,
      py::arg("key_vocab") = 256, py::arg("value_vocab") = 256, py::arg("pad_split") = 1.0);

  py::class_<PyMambaBlock>(m, "MambaBlock")
      .def(py::init<i64, u64, double, i64, i64>(), py::arg("d_model_in"), py::arg("seed"),
           py::arg("k_epd") = 2.0, py::arg("d_conv") = 4, py::arg("d_state") = 16)
      .def("forward_parallel", &PyMambaBlock::forward_parallel)
      .def("step", &PyMambaBlock::step)
      .def("reset", &PyMambaBlock::reset)
      .def_property_readonly("state_element_count", &PyMambaBlock::state_element_count);

  py::class_<PyModel>(m, "Model")
      .def_static("random", &PyModel::random, py::arg("n_layers"), py::arg("d_model"),
                  py::arg("n_heads"), py::arg("n_kv_heads"), py::arg("vocab_size"),
                  py::arg("beta") = 0.0, py::arg("seed") = 0)
      .def_static("load", &PyModel::load)
      .def("save", &PyModel::save)
      .def("logits", &PyModel::logits)
      .def("generate", &PyModel::generate, py::arg("prompt"), py::arg("n_new"))
      .def("convert", &PyModel::convert, py::arg("ra_index"), py::arg("beta"),
           py::arg("seed") = 0)
      .def("cache_trace", &PyModel::cache_trace, py::arg("prefill_len"), py::arg("gen_steps"),
           py::arg("seed") = 0)
      .def("heads_m", &PyModel::heads_m)
      .def_property_readonly("parameter_count", &PyModel::parameter_count);
}
