#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "safm/decision.hpp"
#include "safm/evaluation.hpp"
#include "safm/experiment.hpp"
#include "safm/tasks.hpp"

namespace py = pybind11;
using namespace safm;

namespace {

RMatrix rmatrix_from_rows(const std::vector<std::vector<double>>& rows) {
  RMatrix r;
  for (auto row : rows) r.add_row(std::move(row));
  return r;
}

py::dict report_to_dict(const EvalReport& rep) {
  py::dict d;
  d["method"] = rep.method;
  d["seed"] = rep.seed;
  d["score"] = rep.score;
  d["bwt"] = rep.bwt ? py::cast(*rep.bwt) : py::none();
  d["learnable_params"] = rep.learnable_params;
  d["diagonal"] = rep.diagonal;
  d["r_matrix"] = rep.r.rows();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Sparse adapter fusion continual-learning core";

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("layers", &ModelConfig::layers)
      .def_readwrite("width", &ModelConfig::width)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("max_seq", &ModelConfig::max_seq)
      .def_readwrite("bottleneck", &ModelConfig::bottleneck)
      .def_readwrite("base_vocab", &ModelConfig::base_vocab)
      .def_readwrite("max_tasks", &ModelConfig::max_tasks)
      .def("vocab", &ModelConfig::vocab)
      .def("task_token", &ModelConfig::task_token)
      .def("base_token", &ModelConfig::base_token);

  m.def("init_lambda", &init_lambda, py::arg("k"), py::arg("alpha"), py::arg("beta"),
        py::arg("strict") = true,
        "Softmax-initialized fusion weights [empty, reused..., new]");
  m.def("default_no_as_layers", &default_no_as_layers, py::arg("num_layers"));
  m.def("adapter_param_count", &Adapter::param_count, py::arg("width"), py::arg("bottleneck"));
  m.def("backbone_param_count", &BackboneParams::param_count, py::arg("config"));

  m.def(
      "make_stream",
      [](const std::string& scenario, int n_tasks, std::uint64_t seed) {
        ModelConfig cfg;
        auto stream = scenario == "similar" ? make_similar_stream(cfg, n_tasks, seed)
                                            : make_dissimilar_stream(cfg, n_tasks, seed);
        return stream_to_json(stream);
      },
      py::arg("scenario"), py::arg("n_tasks"), py::arg("seed"),
      "Stream manifest as a JSON string");

  m.def(
      "materialize_task",
      [](const std::string& stream_json, int task) {
        auto stream = stream_from_json(stream_json);
        for (const auto& spec : stream.specs) {
          if (spec.task != task) continue;
          auto data = materialize(spec);
          py::dict d;
          auto conv = [](const std::vector<Sample>& ss) {
            py::list out;
            for (const auto& s : ss) {
              py::dict e;
              e["task"] = s.task;
              e["x"] = s.x;
              e["y"] = s.y;
              out.append(e);
            }
            return out;
          };
          d["train"] = conv(data.train);
          d["valid"] = conv(data.valid);
          d["test"] = conv(data.test);
          return d;
        }
        throw std::invalid_argument("materialize_task: no task " + std::to_string(task));
      },
      py::arg("stream_json"), py::arg("task"));

  m.def(
      "encode_sample",
      [](int task, const std::vector<int>& x, const std::vector<int>& y) {
        return encode_sample(ModelConfig{}, Sample{task, x, y});
      },
      py::arg("task"), py::arg("x"), py::arg("y"));

  m.def(
      "score", [](const std::vector<std::vector<double>>& rows) { return score(rmatrix_from_rows(rows)); },
      py::arg("r_matrix"));
  m.def(
      "bwt", [](const std::vector<std::vector<double>>& rows) { return bwt(rmatrix_from_rows(rows)); },
      py::arg("r_matrix"));

  m.def(
      "run_seed",
      [](const std::string& config_json, std::uint64_t seed, const std::string& run_dir) {
        auto cfg = ExperimentConfig::from_json(config_json);
        return report_to_dict(run_seed(cfg, seed, run_dir).report);
      },
      py::arg("config_json"), py::arg("seed"), py::arg("run_dir") = "",
      "Run one seed; returns the evaluation report as a dict");

  m.def(
      "run_experiment",
      [](const std::string& config_json) {
        auto cfg = ExperimentConfig::from_json(config_json);
        py::list out;
        for (const auto& rep : run_experiment(cfg)) out.append(report_to_dict(rep));
        return out;
      },
      py::arg("config_json"));

  m.def("aggregate_report", &write_aggregate_report, py::arg("dir"),
        "Write report.md/report.csv under dir and return the markdown");

  m.def("default_config_json", [] { return ExperimentConfig{}.to_json(); });
}
