#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "opensat/eval.hpp"
#include "opensat/ingest.hpp"
#include "opensat/interchange.hpp"
#include "opensat/refine.hpp"
#include "opensat/retriever.hpp"
#include "opensat/store.hpp"
#include "opensat/tiler.hpp"

namespace py = pybind11;
using namespace opensat;

namespace {

Embedding to_embedding(const std::vector<float>& v) { return Embedding(v); }
std::vector<float> to_list(const Embedding& e) { return {e.values().begin(), e.values().end()}; }

py::object json_to_py(const nlohmann::json& j) {
    return py::module_::import("json").attr("loads")(j.dump());
}

// Exposes ErrorCode names on the Python side via OpenSatError.code.
PyObject* g_error_type = nullptr;

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Open-vocabulary satellite tile retrieval engine";

    g_error_type = PyErr_NewException("opensat.OpenSatError", PyExc_RuntimeError, nullptr);
    m.attr("OpenSatError") = py::handle(g_error_type);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            py::object err = py::reinterpret_borrow<py::object>(g_error_type)(e.what());
            err.attr("code") = std::string(to_string(e.code()));
            PyErr_SetObject(g_error_type, err.ptr());
        }
    });

    py::class_<TileRect>(m, "TileRect")
        .def_readonly("x", &TileRect::x)
        .def_readonly("y", &TileRect::y)
        .def_readonly("width", &TileRect::width)
        .def_readonly("height", &TileRect::height)
        .def("__repr__", [](const TileRect& r) {
            return "TileRect(" + std::to_string(r.x) + ", " + std::to_string(r.y) + ", " + std::to_string(r.width) +
                   ", " + std::to_string(r.height) + ")";
        });

    m.def(
        "plan_grid",
        [](std::uint32_t width, std::uint32_t height, std::uint32_t tile, std::uint32_t stride) {
            auto grid = plan_grid({width, height, tile, stride ? stride : tile});
            py::list tiles;
            for (const auto& t : grid.tiles) tiles.append(py::make_tuple(t.row, t.col, t.rect, t.undersized));
            return py::make_tuple(grid.rows, grid.cols, tiles);
        },
        py::arg("width"), py::arg("height"), py::arg("tile_size") = kDefaultTileSize, py::arg("stride") = 0,
        "Returns (rows, cols, [(row, col, rect, undersized), ...]).");

    m.def(
        "cosine_similarity",
        [](const std::vector<float>& a, const std::vector<float>& b) {
            return cosine_similarity(to_embedding(a), to_embedding(b)).value();
        },
        py::arg("a"), py::arg("b"));
    m.def(
        "l2_normalize", [](const std::vector<float>& a) { return to_list(l2_normalize(to_embedding(a))); },
        py::arg("a"));

    m.def("base_prompt", &base_prompt, py::arg("object"));
    m.def("composed_prompt", &composed_prompt, py::arg("object"), py::arg("surrounding"));
    m.def("surrounding_prompt", &surrounding_prompt, py::arg("surrounding"));

    py::class_<MockEmbedder, std::shared_ptr<MockEmbedder>>(m, "MockEmbedder")
        .def(py::init<std::size_t, std::uint64_t>(), py::arg("dim") = kDefaultDim, py::arg("seed") = 0)
        .def_property_readonly("dim", &MockEmbedder::dim)
        .def("embed_text", [](const MockEmbedder& e, const std::vector<std::string>& texts) {
            std::vector<std::vector<float>> out;
            for (const auto& v : e.embed_text(std::span<const std::string>(texts))) out.push_back(to_list(v));
            return out;
        });

    m.def(
        "refine_single",
        [](const std::vector<float>& base, const std::vector<float>& composed, const std::vector<float>& background,
           double alpha, double beta, const std::string& stage) {
            RefinementConfig cfg{alpha, beta, 1, parse_normalize_stage(stage)};
            return to_list(refine_single(to_embedding(base), to_embedding(composed), to_embedding(background), cfg));
        },
        py::arg("base"), py::arg("composed"), py::arg("background"), py::arg("alpha") = 1.0, py::arg("beta") = 1.0,
        py::arg("normalize_stage") = "both");

    m.def(
        "refine",
        [](const std::vector<float>& base, const std::vector<std::vector<float>>& composed,
           const std::vector<std::vector<float>>& backgrounds, double alpha, double beta, const std::string& stage) {
            std::vector<Embedding> c, b;
            for (const auto& v : composed) c.push_back(to_embedding(v));
            for (const auto& v : backgrounds) b.push_back(to_embedding(v));
            RefinementConfig cfg{alpha, beta, c.size(), parse_normalize_stage(stage)};
            return to_list(refine_embeddings(to_embedding(base), c, b, cfg).refined);
        },
        py::arg("base"), py::arg("composed"), py::arg("backgrounds"), py::arg("alpha") = 1.0, py::arg("beta") = 1.0,
        py::arg("normalize_stage") = "both");

    m.def(
        "class_metrics",
        [](std::size_t tp, std::size_t fp, std::size_t fn) {
            auto c = metrics_from_counts("", tp, fp, fn);
            return py::make_tuple(c.precision, c.recall, c.f1);
        },
        py::arg("tp"), py::arg("fp"), py::arg("fn"), "Returns (precision, recall, f1).");

    py::class_<Store>(m, "Store")
        .def_static("create", &Store::create, py::arg("root"), py::arg("dim"))
        .def_static("open", &Store::open, py::arg("root"))
        .def_static("open_or_create", &Store::open_or_create, py::arg("root"), py::arg("dim"))
        .def_static("in_memory", &Store::in_memory, py::arg("dim"))
        .def("__len__", &Store::size)
        .def_property_readonly("dim", &Store::dim)
        .def_property_readonly("persistent", &Store::persistent)
        .def("manifest_digest", &Store::manifest_digest)
        .def(
            "insert",
            [](Store& s, const std::vector<std::tuple<std::string, std::vector<float>, std::optional<std::string>>>& rows) {
                std::vector<TileRecord> records;
                for (const auto& [key, vec, label] : rows) {
                    records.push_back(TileRecord{TileId::from_key(key), l2_normalize(to_embedding(vec)), {}, label, {}});
                }
                return s.insert_batch(std::move(records));
            },
            py::arg("records"), "records: [(key, vector, label or None)]; vectors are normalized first.")
        .def(
            "top_k",
            [](const Store& s, const std::vector<float>& q, std::size_t k) {
                std::vector<std::pair<std::string, double>> out;
                for (const auto& t : s.top_k(to_embedding(q), k)) out.emplace_back(t.id.key(), t.score.value());
                return out;
            },
            py::arg("query"), py::arg("k"))
        .def(
            "ingest",
            [](Store& s, const std::filesystem::path& image, const MockEmbedder& embedder, const std::string& image_id,
               std::uint32_t tile_size, std::uint32_t stride) {
                IngestOptions opts;
                opts.image_id = image_id;
                opts.tile_size = tile_size;
                opts.stride = stride;
                auto r = ingest_file(image, s, embedder, opts);
                return py::make_tuple(r.rows, r.cols, r.tiles);
            },
            py::arg("image"), py::arg("embedder"), py::arg("image_id") = "", py::arg("tile_size") = kDefaultTileSize,
            py::arg("stride") = 0, "Returns (rows, cols, tiles).")
        .def(
            "query",
            [](const Store& s, const MockEmbedder& embedder, const std::string& text, const std::string& method,
               const std::optional<std::filesystem::path>& fixture, std::optional<std::string> object,
               std::optional<std::vector<std::string>> surroundings, double threshold, double alpha, double beta,
               std::size_t n) {
                std::shared_ptr<ContextDeriver> contexts;
                if (fixture) {
                    contexts = std::make_shared<ContextDeriver>(
                        std::make_shared<const ContextFixture>(ContextFixture::load(*fixture)));
                }
                Retriever retriever(s, std::make_shared<MockEmbedder>(embedder), contexts);
                RetrievalRequest req;
                req.query = text;
                req.method = parse_retrieval_method(method);
                req.threshold = threshold;
                req.cfg.alpha = alpha;
                req.cfg.beta = beta;
                req.cfg.n = n;
                req.object_override = std::move(object);
                req.surroundings_override = std::move(surroundings);
                return json_to_py(result_to_json(retriever.retrieve(req), {.include_elapsed = false}));
            },
            py::arg("embedder"), py::arg("text"), py::arg("method") = "refined", py::arg("fixture") = py::none(),
            py::arg("object") = py::none(), py::arg("surroundings") = py::none(),
            py::arg("threshold") = kDefaultThreshold, py::arg("alpha") = 1.0, py::arg("beta") = 1.0,
            py::arg("n") = kDefaultSurroundings, "Runs a retrieval and returns the /query response as a dict.");

    m.def(
        "read_embeddings",
        [](const std::filesystem::path& path) {
            ImportStats stats;
            auto records = import_embeddings(path, &stats);
            py::list out;
            for (const auto& r : records) out.append(py::make_tuple(r.key, to_list(r.embedding), r.label));
            return py::make_tuple(out, stats.normalization_fixes);
        },
        py::arg("path"), "Returns ([(key, vector, label)], normalization_fixes).");
}
