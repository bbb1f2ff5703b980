// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "pvt/bundle.hpp"
#include "pvt/harness.hpp"

namespace py = pybind11;
using namespace pvt;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    const auto data = t.data();
    std::copy(data.begin(), data.end(), out.mutable_data());
    return out;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor::from(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

nlohmann::json parse(const std::string& text) {
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::MalformedDocument, e.what());
    }
}

RunRequest make_request(const std::vector<std::vector<int64_t>>& base,
                        const std::vector<std::vector<std::vector<int64_t>>>& sources,
                        const std::string& unit_locations, const std::string& subspaces,
                        const std::map<size_t, py::array_t<double>>& source_representations, bool output_original) {
    RunRequest req;
    req.base = ModelInput::from_ids(base);
    for (const auto& s : sources) req.sources.push_back(ModelInput::from_ids(s));
    if (!unit_locations.empty()) req.unit_locations = parse_unit_locations(parse(unit_locations));
    if (!subspaces.empty()) req.subspaces = IndexTree::from_json(parse(subspaces));
    for (const auto& [i, a] : source_representations) req.source_representations[i] = from_numpy(a);
    req.output_original = output_original;
    return req;
}

py::dict to_dict(const IntervenedOutput& out) {
    py::dict d;
    d["logits"] = to_numpy(out.intervened.logits);
    d["original"] = out.original ? py::object(to_numpy(out.original->logits)) : py::none();
    py::list collected;
    for (const auto& t : out.collected) collected.append(to_numpy(t));
    d["collected"] = collected;
    return d;
}

}  // namespace

PYBIND11_MODULE(_pvt, m) {
    m.doc() = "Interventions on toy neural models.";

    // Raised for every library error; `.code` holds the error code name.
    static py::handle error_type = py::exception<Error>(m, "PvtError").release();
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            py::object exc = py::reinterpret_borrow<py::object>(error_type)(e.what());
            exc.attr("code") = std::string(to_string(e.code()));
            PyErr_SetObject(error_type.ptr(), exc.ptr());
        }
    });

    py::class_<Model>(m, "Model")
        .def_static(
            "build",
            [](const std::string& schema_json, uint64_t seed, std::optional<std::vector<std::string>> tokens) {
                ModelSchema schema = ModelSchema::from_json(parse(schema_json));
                std::optional<Vocab> vocab;
                if (tokens) {
                    vocab = Vocab::from_tokens(*tokens);
                    schema.vocab_size = vocab->size();
                }
                return Model::build(schema, seed, vocab);
            },
            py::arg("schema_json"), py::arg("seed") = 0, py::arg("tokens") = py::none())
        .def_static("load", &Model::load)
        .def("save", &Model::save)
        .def_property_readonly("schema_json", [](const Model& self) { return self.schema().to_json().dump(); })
        .def_property_readonly("tokens", [](const Model& self) { return self.vocab().tokens(); })
        .def("encode", [](const Model& self, const std::string& text) { return self.vocab().encode(text); })
        .def("decode", [](const Model& self, const std::vector<int64_t>& ids) { return self.vocab().decode(ids); })
        .def("forward",
             [](const Model& self, const std::vector<std::vector<int64_t>>& ids) {
                 return to_numpy(self.forward(ModelInput::from_ids(ids)).logits);
             })
        .def("trace",
             [](const Model& self, const std::vector<std::vector<int64_t>>& ids,
                const std::vector<std::pair<std::string, int64_t>>& sites) {
                 std::vector<SiteKey> keys;
                 for (const auto& [c, l] : sites) keys.push_back({c, l});
                 const ForwardTrace t = self.trace(ModelInput::from_ids(ids), keys);
                 py::dict d;
                 for (const auto& [k, v] : t.sites) d[py::make_tuple(k.component, k.layer)] = to_numpy(v);
                 return d;
             })
        .def("parameter", [](const Model& self, const std::string& name) { return to_numpy(self.param(name)); })
        .def("parameter_names", [](const Model& self) {
            std::vector<std::string> names;
            for (const auto& [n, t] : self.parameters()) names.push_back(n);
            return names;
        });

    m.def("greedy_decode", &greedy_decode, py::arg("model"), py::arg("prompt"), py::arg("steps"));

    py::class_<IntervenableModel>(m, "IntervenableModel")
        .def(py::init([](const Model& model, const std::string& config_json, uint64_t seed) {
                 return IntervenableModel(model, parse_config(parse(config_json)), seed);
             }),
             py::arg("model"), py::arg("config_json"), py::arg("seed") = 0)
        .def_property_readonly("config_json",
                               [](const IntervenableModel& self) { return config_to_json(self.config()).dump(); })
        .def_property_readonly("model", [](const IntervenableModel& self) { return self.model(); })
        .def("num_trainable_scalars", &IntervenableModel::num_trainable_scalars)
        .def("run",
             [](const IntervenableModel& self, const std::vector<std::vector<int64_t>>& base,
                const std::vector<std::vector<std::vector<int64_t>>>& sources, const std::string& unit_locations,
                const std::string& subspaces, const std::map<size_t, py::array_t<double>>& source_representations,
                bool output_original) {
                 return to_dict(self.run(make_request(base, sources, unit_locations, subspaces,
                                                      source_representations, output_original)));
             },
             py::arg("base"), py::arg("sources") = std::vector<std::vector<std::vector<int64_t>>>{},
             py::arg("unit_locations") = "", py::arg("subspaces") = "",
             py::arg("source_representations") = std::map<size_t, py::array_t<double>>{},
             py::arg("output_original") = false)
        .def("generate",
             [](const IntervenableModel& self, const std::vector<int64_t>& prompt, int64_t steps,
                std::optional<std::set<int64_t>> step_selector) {
                 GenerateOptions opts;
                 opts.steps = steps;
                 opts.step_selector = std::move(step_selector);
                 const GenerateResult r = self.generate(prompt, opts);
                 py::list logits;
                 for (const auto& t : r.step_logits) logits.append(to_numpy(t));
                 return py::make_tuple(r.ids, logits);
             },
             py::arg("prompt"), py::arg("steps") = 1, py::arg("step_selector") = py::none())
        .def("save", &save_bundle, py::arg("dir"), py::arg("include_model_weights") = false);

    m.def("load_bundle", &load_bundle, py::arg("dir"), py::arg("model") = py::none());

    m.def(
        "check_config",
        [](const std::string& config_json, const Model& model) { check_config(parse_config(parse(config_json)), model.schema()); },
        py::arg("config_json"), py::arg("model"));

    m.def(
        "trace_window",
        [](int64_t layer, int64_t width, int64_t total_layers) {
            const harness::TraceWindow w = harness::trace_window(layer, width, total_layers);
            return py::make_tuple(w.begin, w.end);
        },
        py::arg("layer"), py::arg("width"), py::arg("total_layers"));

    m.def(
        "make_dataset",
        [](const std::string& task, uint64_t seed, const std::filesystem::path& out) {
            harness::save_dataset(harness::make_dataset(harness::parse_task(task), seed), out);
        },
        py::arg("task"), py::arg("seed"), py::arg("out"));
}
