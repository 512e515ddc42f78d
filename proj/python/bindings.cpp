#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "cli.hpp"
#include "sprune/analysis.hpp"
#include "sprune/arch.hpp"
#include "sprune/data.hpp"
#include "sprune/error.hpp"
#include "sprune/gate_learn.hpp"
#include "sprune/pipeline.hpp"
#include "sprune/record.hpp"
#include "sprune/search.hpp"
#include "sprune/trainer.hpp"
#include "sprune/version.hpp"

namespace py = pybind11;
using namespace sprune;

namespace {

using Gates = std::vector<std::vector<float>>;

GateState to_state(const Gates& g) {
  GateState s;
  s.lambda = g;
  return s;
}

py::dict search_dict(const SearchResult& r) {
  py::list trace;
  for (const auto& s : r.trace) {
    trace.append(py::dict(py::arg("iteration") = s.iteration, py::arg("tau") = s.tau,
                          py::arg("flops") = s.flops, py::arg("rel_gap") = s.rel_gap));
  }
  return py::dict(py::arg("tau_star") = r.tau_star, py::arg("kept_indices") = r.config.kept_indices,
                  py::arg("kept_counts") = r.config.kept_counts(),
                  py::arg("achieved_flops") = r.achieved_flops, py::arg("iterations") = r.iterations,
                  py::arg("converged") = r.converged, py::arg("trace") = trace,
                  py::arg("diagnostics") = r.diagnostics);
}

py::dict record_dict(const RunRecord& rec) {
  py::list traj;
  for (const auto& s : rec.trajectory) {
    traj.append(py::dict(py::arg("epoch") = s.epoch, py::arg("step") = s.gates.step,
                         py::arg("sparsity") = s.sparsity(), py::arg("val_accuracy") = s.val_accuracy,
                         py::arg("gates") = s.gates.lambda));
  }
  py::list reports;
  for (const auto& r : rec.reports) {
    py::list epochs;
    for (const auto& e : r.epochs) {
      epochs.append(py::dict(py::arg("epoch") = e.epoch, py::arg("lr") = e.lr,
                             py::arg("train_loss") = e.train_loss, py::arg("val_acc") = e.val_acc));
    }
    reports.append(py::dict(py::arg("epochs") = epochs, py::arg("test_accuracy") = r.test_accuracy,
                            py::arg("effective_epochs") = r.effective_epochs,
                            py::arg("seed") = r.seed, py::arg("flops") = r.flops));
  }
  py::dict d;
  d["tool_version"] = rec.tool_version;
  d["config_hash"] = rec.config_hash;
  d["config_json"] = rec.config_json;
  d["seeds"] = rec.seeds;
  d["arch_name"] = rec.arch_name;
  d["gated_layer_ids"] = rec.gated_layer_ids;
  d["original_widths"] = rec.original_widths;
  d["full_flops"] = rec.full_flops;
  d["trajectory"] = traj;
  d["selected_snapshot"] = rec.selected_snapshot ? py::cast(*rec.selected_snapshot) : py::none();
  d["search"] = rec.search ? py::object(search_dict(*rec.search)) : py::none();
  d["reports"] = reports;
  d["files"] = rec.files;
  d["failed_stage"] = rec.failed_stage;
  d["failure_message"] = rec.failure_message;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Channel pruning from randomly initialized weights";
  m.attr("__version__") = kToolVersion;

  static py::handle exc = py::exception<Error>(m, "SpruneError", PyExc_RuntimeError).release();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object err = py::reinterpret_borrow<py::object>(exc)(e.what());
      py::setattr(err, "kind", py::str(std::string(to_string(e.kind()))));
      PyErr_SetObject(exc.ptr(), err.ptr());
    }
  });

  m.def("preset_names", &preset_names);
  m.def(
      "preset",
      [](const std::string& name, int in_channels, int height, int width, int classes, double expand) {
        ArchSpec a = make_preset(name, in_channels, height, width, classes);
        if (expand != 1.0) a = expand_channels(a, expand);
        return arch_to_json(a);
      },
      py::arg("name"), py::arg("in_channels") = 3, py::arg("height") = 8, py::arg("width") = 8,
      py::arg("classes") = 3, py::arg("expand") = 1.0, "Architecture JSON for a preset.");
  m.def("gated_widths", [](const std::string& arch_json) {
    const ArchSpec a = arch_from_json(arch_json);
    return gated_widths(a, place_gates(a));
  });
  m.def(
      "count_flops",
      [](const std::string& arch_json, std::optional<std::vector<std::vector<int>>> kept) {
        const ArchSpec a = arch_from_json(arch_json);
        if (!kept) return count_flops(a);
        ChannelConfig c;
        c.kept_indices = *kept;
        return count_flops(a, c);
      },
      py::arg("arch_json"), py::arg("kept_indices") = py::none());

  m.def("sparsity_penalty", [](const Gates& g, double r) { return sparsity_penalty(to_state(g), r); });
  m.def("prune_by_threshold",
        [](const Gates& g, double tau) { return prune_by_threshold(to_state(g), tau).kept_indices; });
  m.def(
      "search_structure",
      [](const Gates& g, const std::string& arch_json, double budget_ratio, int max_iters,
         double tolerance) {
        const ArchSpec a = arch_from_json(arch_json);
        SearchConfig cfg;
        cfg.budget = static_cast<std::int64_t>(std::llround(budget_ratio * count_flops(a)));
        cfg.max_iters = max_iters;
        cfg.rel_tolerance = tolerance;
        return search_dict(search_structure(to_state(g), a, cfg));
      },
      py::arg("gates"), py::arg("arch_json"), py::arg("budget_ratio") = 0.5, py::arg("max_iters") = 20,
      py::arg("tolerance") = 0.02);
  m.def("budget_epochs", &budget_epochs, py::arg("base_epochs"), py::arg("full_flops"),
        py::arg("pruned_flops"));

  m.def("pearson", [](const std::vector<double>& a, const std::vector<double>& b) { return pearson(a, b); });
  m.def("correlation_matrix", [](const std::vector<std::vector<double>>& ratios) {
    std::vector<StructureFeature> f(ratios.size());
    for (std::size_t i = 0; i < ratios.size(); ++i) {
      f[i].ratios = ratios[i];
      f[i].label = "s" + std::to_string(i);
    }
    return correlation_matrix(f).values;
  });

  m.def(
      "parse_cifar10",
      [](py::bytes data) {
        const std::string s = data;
        const Dataset d = parse_cifar10(
            std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()),
            "bytes");
        const auto& shape = d.images.shape();
        py::array_t<float> images(std::vector<py::ssize_t>(shape.begin(), shape.end()));
        std::copy(d.images.data().begin(), d.images.data().end(), images.mutable_data());
        return py::make_tuple(images, d.labels);
      },
      "Decode CIFAR-10 binary records into (images[N,3,32,32] in [0,1], labels).");

  m.def("default_config", [] { return config_to_json(PipelineConfig{}); });
  m.def(
      "prune",
      [](const std::string& config_json, std::uint64_t seed) {
        const PipelineConfig cfg = config_from_json(config_json);
        PruneOutcome r;
        {
          py::gil_scoped_release release;
          const DataSplits data = load_data(cfg.dataset, seed);
          r = run_prune(cfg, data, seed);
        }
        py::dict d = record_dict(r.record);
        d["record_path"] = r.record_path;
        d["flops_ratio"] = r.flops_ratio;
        d["test_accuracy"] = r.test_accuracy;
        return d;
      },
      py::arg("config_json"), py::arg("seed") = 0,
      "Run the full pipeline for one seed; the record is saved under the config's output directory.");
  m.def("load_run", [](const std::string& path) { return record_dict(load_run(path)); });
  m.def("run_cli", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    int code;
    {
      py::gil_scoped_release release;
      code = cli::run(args, out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
  });
}
