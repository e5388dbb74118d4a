#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>

#include "cqtnet/audio.hpp"
#include "cqtnet/corpus.hpp"
#include "cqtnet/cqt.hpp"
#include "cqtnet/errors.hpp"
#include "cqtnet/gradcheck.hpp"
#include "cqtnet/model.hpp"
#include "cqtnet/retrieval.hpp"
#include "cqtnet/trainer.hpp"

namespace py = pybind11;
using namespace cqtnet;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

AudioClip clip_from(const FloatArray& samples, int sample_rate) {
  if (samples.ndim() != 1) throw py::value_error("samples must be one-dimensional");
  AudioClip clip;
  clip.sample_rate = sample_rate;
  clip.samples.assign(samples.data(), samples.data() + samples.size());
  return clip;
}

// Copies into a fresh array; the explicit shape vector avoids the
// single-integer constructor overloads.
py::array_t<float> to_array(const std::vector<float>& v) {
  return py::array_t<float>(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.size())}, v.data());
}

py::array_t<float> to_array(const CqtMatrix& m) {
  return py::array_t<float>(std::vector<py::ssize_t>{m.rows, m.cols}, m.data.data());
}

CqtMatrix matrix_from(const FloatArray& a) {
  if (a.ndim() != 2) throw py::value_error("features must be two-dimensional (bins, frames)");
  CqtMatrix m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.data.begin());
  return m;
}

py::dict metrics_dict(const MetricsReport& r) {
  py::dict d;
  d["map"] = r.map;
  d["p_at_10"] = r.p_at_10;
  d["mr1"] = r.mr1;
  d["top1"] = r.top1;
  d["queries"] = r.per_query.size();
  d["skipped"] = r.skipped;
  return d;
}

// Eval-mode network loaded from a checkpoint.
class Model {
 public:
  explicit Model(const std::filesystem::path& checkpoint)
      : net_(std::make_unique<CqtNet>(load_checkpoint(checkpoint).net)) {}

  py::array_t<float> embed(const FloatArray& features, int min_frames) {
    return to_array(embed_features(*net_, matrix_from(features), min_frames));
  }

  std::string config_json() const { return config_to_json(net_->config()); }
  std::int64_t min_frames() const { return min_input_length(net_->config()); }

 private:
  std::unique_ptr<CqtNet> net_;
};

}  // namespace

PYBIND11_MODULE(_cqtnet, m) {
  m.doc() = "Cover-song identification toolkit";
  // Owned by the module for the life of the interpreter.
  static PyObject* error_type = py::exception<Error>(m, "Error", PyExc_RuntimeError).release().ptr();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object exc = py::reinterpret_borrow<py::object>(error_type)(e.what());
      exc.attr("kind") = error_kind_name(e.kind());
      PyErr_SetObject(error_type, exc.ptr());
    }
  });

  m.attr("SAMPLE_RATE") = kCqtSampleRate;
  m.attr("CQT_BINS") = kCqtBins;

  m.def("read_wav", [](const std::filesystem::path& path) {
    const AudioClip clip = read_wav(path);
    return py::make_tuple(to_array(clip.samples), clip.sample_rate);
  }, py::arg("path"), "Mono float samples and the sample rate.");
  m.def("write_wav", [](const std::filesystem::path& path, const FloatArray& samples, int sample_rate) {
    write_wav(path, clip_from(samples, sample_rate));
  }, py::arg("path"), py::arg("samples"), py::arg("sample_rate"));
  m.def("resample", [](const FloatArray& samples, int rate, int target) {
    return to_array(resample(clip_from(samples, rate), target).samples);
  }, py::arg("samples"), py::arg("sample_rate"), py::arg("target_rate"));
  m.def("synth_melody", [](const std::vector<std::pair<int, double>>& notes, const std::string& waveform,
                           int sample_rate, double gain) {
    std::vector<Note> n;
    for (const auto& [pitch, dur] : notes) n.push_back({pitch, dur});
    return to_array(synth_melody(n, parse_waveform(waveform), sample_rate, gain).samples);
  }, py::arg("notes"), py::arg("waveform") = "sine", py::arg("sample_rate") = kCqtSampleRate,
        py::arg("gain") = 0.5, "Render (midi_pitch, seconds) pairs.");

  m.def("generate_corpus", [](int songs, int covers, std::uint64_t seed, const std::filesystem::path& out,
                              int threads) {
    return manifest_to_json(generate_corpus(songs, covers, seed, out, threads));
  }, py::arg("songs"), py::arg("covers"), py::arg("seed"), py::arg("out"), py::arg("threads") = 0,
        "Writes audio and manifest.json; returns the manifest JSON.");

  m.def("compute_cqt", [](const FloatArray& samples, int rate) {
    return to_array(compute_cqt(clip_from(samples, rate)));
  }, py::arg("samples"), py::arg("sample_rate"));
  m.def("extract_features", [](const FloatArray& samples, int rate) {
    return to_array(extract_features(clip_from(samples, rate)));
  }, py::arg("samples"), py::arg("sample_rate"), "Downsampled log-CQT, shape (84, frames).");
  m.def("peak_bin", [](const FloatArray& features) { return peak_bin(matrix_from(features)); },
        py::arg("features"));
  m.def("tempo_stretch", [](const FloatArray& samples, int rate, double r) {
    return to_array(tempo_stretch(clip_from(samples, rate), r).samples);
  }, py::arg("samples"), py::arg("sample_rate"), py::arg("rate"));

  m.def("default_config", [](int num_classes) { return config_to_json(default_config(num_classes)); },
        py::arg("num_classes") = 4611);
  m.def("narrow_config", [](const std::string& config, int divisor) {
    return config_to_json(narrow_config(config_from_json(config), divisor));
  }, py::arg("config"), py::arg("divisor"));
  m.def("ablation_config", [](const std::set<int>& pools, int num_classes) {
    return config_to_json(ablation_config(pools, num_classes));
  }, py::arg("pools"), py::arg("num_classes") = 4611);
  m.def("min_input_length", [](const std::string& config) { return min_input_length(config_from_json(config)); },
        py::arg("config"));
  m.def("receptive_field", [](const std::string& config, std::size_t convs) {
    const ReceptiveField rf = receptive_field(config_from_json(config), convs);
    return py::make_tuple(rf.height, rf.width);
  }, py::arg("config"), py::arg("convs"), "(height, width) after the first `convs` convolutions.");
  m.def("total_vertical_stride", [](const std::string& config) {
    return total_vertical_stride(config_from_json(config));
  }, py::arg("config"));

  py::class_<Model>(m, "Model")
      .def(py::init<const std::filesystem::path&>(), py::arg("checkpoint"))
      .def("embed", &Model::embed, py::arg("features"), py::arg("min_frames") = kDefaultEmbedFrames,
           "300-d embedding of one (84, frames) feature matrix.")
      .def_property_readonly("config", &Model::config_json)
      .def_property_readonly("min_frames", &Model::min_frames);

  m.def("cosine_similarity", [](const FloatArray& u, const FloatArray& v) {
    return cosine_similarity({u.data(), static_cast<std::size_t>(u.size())},
                             {v.data(), static_cast<std::size_t>(v.size())});
  }, py::arg("u"), py::arg("v"));
  m.def("load_index", [](const std::filesystem::path& path) {
    py::list out;
    for (const auto& e : load_index(path).entries) {
      out.append(py::make_tuple(e.recording_id, e.class_id, to_array(e.vector)));
    }
    return out;
  }, py::arg("path"), "List of (recording_id, class_id, vector).");
  m.def("query", [](const std::filesystem::path& index, const std::string& id, std::size_t topk) {
    const RankingList list = rank(id, load_index(index));
    py::list out;
    for (std::size_t i = 0; i < std::min(topk, list.items.size()); ++i) {
      out.append(py::make_tuple(list.items[i].recording_id, list.items[i].similarity));
    }
    return out;
  }, py::arg("index"), py::arg("query_id"), py::arg("topk") = 10);
  m.def("evaluate", [](const std::filesystem::path& index, const std::filesystem::path& manifest,
                       const std::string& query_split) {
    const EmbeddingIndex all = load_index(index);
    const Split split = parse_split(query_split);
    std::set<std::string> ids;
    for (const auto& e : load_manifest(manifest).entries) {
      if (e.split == split) ids.insert(e.recording_id);
    }
    return metrics_dict(evaluate(all.select(ids), all));
  }, py::arg("index"), py::arg("manifest"), py::arg("query_split") = "test",
        "Queries from one split ranked against every indexed recording.");

  m.def("gradient_suite", [](double tolerance) {
    py::list out;
    for (const auto& r : run_gradient_suite(tolerance)) {
      py::dict d;
      d["name"] = r.name;
      d["max_relative_error"] = r.max_relative_error;
      d["passed"] = r.passed;
      out.append(d);
    }
    return out;
  }, py::arg("tolerance") = 1e-5);
}
