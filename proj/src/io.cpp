#include "gradtrace/io.hpp"

#include <charconv>
#include <chrono>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "gradtrace/rng.hpp"

namespace gradtrace {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::string format_double(double v) {
    char buf[40];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc())
        fail(Errc::numeric, "cannot format double");
    return std::string(buf, ptr);
}

double parse_double(const std::string& s) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        fail(Errc::corruption, "bad numeric field '" + s + "'");
    return v;
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(Errc::io, "cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) fail(Errc::io, "short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) fail(Errc::io, "cannot rename " + tmp.string() + " into place: " + ec.message());
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(Errc::io, "cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

void save_dataset(const fs::path& path, const std::vector<Example>& data) {
    std::string out;
    for (const Example& z : data) {
        ordered_json j;
        j["id"] = z.id;
        j["task"] = z.task;
        j["query"] = query_text(z);
        j["response"] = response_text(z);
        out += j.dump();
        out += '\n';
    }
    write_file_atomic(path, out);
}

std::vector<Example> load_dataset(const fs::path& path, const ModelConfig& cfg) {
    std::string bytes = read_file(path);
    std::vector<Example> out;
    size_t line_no = 0;
    size_t pos = 0;
    while (pos < bytes.size()) {
        size_t end = bytes.find('\n', pos);
        if (end == std::string::npos) end = bytes.size();
        std::string line = bytes.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (line.empty()) continue;
        ordered_json j = ordered_json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("id") || !j.contains("task") ||
            !j.contains("query") || !j.contains("response"))
            fail(Errc::corruption,
                 path.string() + ": line " + std::to_string(line_no) + " is not a dataset record");
        out.push_back(make_example(j["id"].get<std::string>(), j["task"].get<std::string>(),
                                   j["query"].get<std::string>(),
                                   j["response"].get<std::string>(), cfg));
    }
    return out;
}

namespace {

constexpr char kCkptMagic[4] = {'G', 'T', 'C', 'K'};
constexpr uint32_t kCkptVersion = 1;

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
    const std::string& bytes;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > bytes.size()) fail(Errc::corruption, "checkpoint truncated");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str(size_t n) {
        need(n);
        std::string s = bytes.substr(pos, n);
        pos += n;
        return s;
    }
};

} // namespace

void save_checkpoint(const fs::path& path, const ModelState& state) {
    // f64 payloads are written as raw little-endian words; this targets the
    // little-endian hosts the toolchain supports.
    std::string out;
    out.append(kCkptMagic, 4);
    put_u32(out, kCkptVersion);
    put_u64(out, state.step);

    std::vector<std::pair<std::string, const Tensor*>> tensors;
    for (const auto& [name, t] : state.base) tensors.emplace_back(name, &t);
    for (const auto& [name, t] : state.adapter) tensors.emplace_back(name, &t);

    put_u32(out, static_cast<uint32_t>(tensors.size()));
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        put_u32(out, static_cast<uint32_t>(name.size()));
        out += name;
        put_u32(out, static_cast<uint32_t>(t->shape.size()));
        for (size_t d : t->shape) put_u64(out, d);
        put_u64(out, offset);
        offset += t->numel();
    }
    put_u64(out, offset);
    for (const auto& [name, t] : tensors) {
        size_t bytes = t->data.size() * sizeof(double);
        size_t at = out.size();
        out.resize(at + bytes);
        std::memcpy(out.data() + at, t->data.data(), bytes);
    }
    put_u64(out, fnv1a64(out.data(), out.size()));
    write_file_atomic(path, out);
}

uint64_t checkpoint_file_hash(const fs::path& path) {
    std::string bytes = read_file(path);
    return fnv1a64(bytes.data(), bytes.size());
}

ModelState load_checkpoint(const fs::path& path, const ModelConfig& cfg) {
    std::string bytes = read_file(path);
    if (bytes.size() < 4 + 4 + 8 + 4 + 8 + 8) fail(Errc::corruption, path.string() + ": checkpoint truncated");
    if (std::memcmp(bytes.data(), kCkptMagic, 4) != 0)
        fail(Errc::corruption, path.string() + ": bad checkpoint magic");
    uint64_t stored_hash = 0;
    for (int i = 0; i < 8; ++i)
        stored_hash |= static_cast<uint64_t>(
                           static_cast<unsigned char>(bytes[bytes.size() - 8 + i]))
                       << (8 * i);
    if (fnv1a64(bytes.data(), bytes.size() - 8) != stored_hash)
        fail(Errc::corruption, path.string() + ": checkpoint hash mismatch");

    ByteReader r{bytes, 4};
    uint32_t version = r.u32();
    if (version != kCkptVersion)
        fail(Errc::version, path.string() + ": unsupported checkpoint version " +
                                std::to_string(version));
    uint64_t step = r.u64();
    uint32_t count = r.u32();

    struct Entry {
        std::string name;
        std::vector<size_t> shape;
        uint64_t offset;
    };
    std::vector<Entry> entries;
    entries.reserve(count);
    uint64_t expected_offset = 0;
    for (uint32_t i = 0; i < count; ++i) {
        Entry e;
        uint32_t name_len = r.u32();
        e.name = r.str(name_len);
        uint32_t ndim = r.u32();
        for (uint32_t d = 0; d < ndim; ++d) e.shape.push_back(r.u64());
        e.offset = r.u64();
        if (e.offset != expected_offset)
            fail(Errc::corruption, path.string() + ": non-contiguous tensor directory");
        expected_offset += shape_numel(e.shape);
        entries.push_back(std::move(e));
    }
    uint64_t payload_len = r.u64();
    if (payload_len != expected_offset)
        fail(Errc::corruption, path.string() + ": payload length disagrees with directory");
    r.need(payload_len * sizeof(double) + 8);

    // The stored tensor set must exactly match the config's parameter set.
    std::vector<ParamSpec> specs = parameter_specs(cfg);
    if (entries.size() != specs.size())
        fail(Errc::corruption, path.string() + ": tensor count does not match model config");

    ModelState state;
    state.cfg = cfg;
    state.step = step;
    std::map<std::string, const ParamSpec*> by_name;
    for (const ParamSpec& s : specs) by_name[s.name] = &s;
    for (const Entry& e : entries) {
        auto it = by_name.find(e.name);
        if (it == by_name.end())
            fail(Errc::corruption, path.string() + ": unexpected tensor " + e.name);
        if (it->second->shape != e.shape)
            fail(Errc::corruption, path.string() + ": tensor " + e.name + " has the wrong shape");
        Tensor t(e.shape);
        std::memcpy(t.data.data(), bytes.data() + r.pos + e.offset * sizeof(double),
                    t.data.size() * sizeof(double));
        if (!t.all_finite())
            fail(Errc::corruption, path.string() + ": tensor " + e.name + " has non-finite values");
        if (it->second->trainable)
            state.adapter.emplace(e.name, std::move(t));
        else
            state.base.emplace(e.name, std::move(t));
    }
    return state;
}

void save_trace_csv(const fs::path& path, const std::vector<TraceRow>& rows) {
    std::string out = "step,metric,value\n";
    for (const TraceRow& r : rows) {
        out += std::to_string(r.step);
        out += ',';
        out += r.metric;
        out += ',';
        out += format_double(r.value);
        out += '\n';
    }
    write_file_atomic(path, out);
}

std::vector<TraceRow> load_trace_csv(const fs::path& path) {
    std::string bytes = read_file(path);
    std::vector<TraceRow> rows;
    size_t pos = 0;
    bool header = true;
    while (pos < bytes.size()) {
        size_t end = bytes.find('\n', pos);
        if (end == std::string::npos) end = bytes.size();
        std::string line = bytes.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty()) continue;
        if (header) {
            if (line != "step,metric,value")
                fail(Errc::corruption, path.string() + ": unexpected CSV header '" + line + "'");
            header = false;
            continue;
        }
        size_t c1 = line.find(',');
        size_t c2 = line.rfind(',');
        if (c1 == std::string::npos || c2 == c1)
            fail(Errc::corruption, path.string() + ": malformed CSV row '" + line + "'");
        TraceRow r;
        r.step = static_cast<uint64_t>(std::stoull(line.substr(0, c1)));
        r.metric = line.substr(c1 + 1, c2 - c1 - 1);
        r.value = parse_double(line.substr(c2 + 1));
        rows.push_back(std::move(r));
    }
    return rows;
}

std::vector<TraceRow> trace_rows(const InfluenceTrace& trace) {
    std::vector<TraceRow> rows;
    for (const TraceRecord& rec : trace.records) {
        rows.push_back({rec.step, trace.labels.in_task, rec.s_in});
        rows.push_back({rec.step, trace.labels.cross_task, rec.s_cross});
    }
    return rows;
}

std::vector<TraceRow> trace_rows(const std::vector<InfluenceTrace>& traces) {
    // grouped by step so per-checkpoint metric blocks stay together
    std::vector<TraceRow> rows;
    if (traces.empty()) return rows;
    size_t records = traces.front().records.size();
    for (const InfluenceTrace& t : traces)
        if (t.records.size() != records)
            fail(Errc::size, "traces cover different checkpoint sets");
    for (size_t r = 0; r < records; ++r) {
        for (const InfluenceTrace& t : traces) {
            rows.push_back({t.records[r].step, t.labels.in_task, t.records[r].s_in});
            rows.push_back({t.records[r].step, t.labels.cross_task, t.records[r].s_cross});
        }
    }
    return rows;
}

void save_matrix_csv(const fs::path& path, const InfluenceTrace& trace) {
    std::string out = "step,probe,eval,value\n";
    for (const TraceRecord& rec : trace.records)
        for (size_t i = 0; i < rec.n; ++i)
            for (size_t j = 0; j < rec.n; ++j) {
                out += std::to_string(rec.step);
                out += ',';
                out += std::to_string(i);
                out += ',';
                out += std::to_string(j);
                out += ',';
                out += format_double(rec.matrix_at(i, j));
                out += '\n';
            }
    write_file_atomic(path, out);
}

namespace {

std::string iso_now() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm_utc;
    gmtime_r(&t, &tm_utc);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

std::string ckpt_filename(uint64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "checkpoint_%06llu.gtck",
                  static_cast<unsigned long long>(step));
    return buf;
}

ordered_json model_to_json(const ModelConfig& m) {
    ordered_json j;
    j["vocab_size"] = m.vocab_size;
    j["embed_dim"] = m.embed_dim;
    j["layers"] = m.layers;
    j["heads"] = m.heads;
    j["context_len"] = m.context_len;
    j["adapter_rank"] = m.adapter_rank;
    j["adapter_alpha"] = m.adapter_alpha;
    return j;
}

ModelConfig model_from_json(const ordered_json& j) {
    ModelConfig m;
    m.vocab_size = j.at("vocab_size").get<size_t>();
    m.embed_dim = j.at("embed_dim").get<size_t>();
    m.layers = j.at("layers").get<size_t>();
    m.heads = j.at("heads").get<size_t>();
    m.context_len = j.at("context_len").get<size_t>();
    m.adapter_rank = j.at("adapter_rank").get<size_t>();
    m.adapter_alpha = j.at("adapter_alpha").get<double>();
    return m;
}

ordered_json train_to_json(const TrainConfig& t) {
    ordered_json j;
    j["epochs"] = t.epochs;
    j["batch_size"] = t.batch_size;
    j["lr_peak"] = t.lr_peak;
    j["lr_final"] = t.lr_final;
    j["warmup_steps"] = t.warmup_steps;
    j["checkpoint_stride"] = t.checkpoint_stride;
    j["seed"] = t.seed;
    return j;
}

TrainConfig train_from_json(const ordered_json& j) {
    TrainConfig t;
    t.epochs = j.at("epochs").get<size_t>();
    t.batch_size = j.at("batch_size").get<size_t>();
    t.lr_peak = j.at("lr_peak").get<double>();
    t.lr_final = j.at("lr_final").get<double>();
    t.warmup_steps = j.at("warmup_steps").get<size_t>();
    t.checkpoint_stride = j.at("checkpoint_stride").get<size_t>();
    t.seed = j.at("seed").get<uint64_t>();
    return t;
}

} // namespace

void save_run(const fs::path& dir, const CheckpointSeries& series, const ModelConfig& model_cfg,
              const TrainConfig& train_cfg, uint64_t weight_seed, const std::string& data_file,
              uint64_t data_hash, size_t data_count) {
    fs::create_directories(dir);
    ordered_json manifest;
    manifest["run_id"] = series.run_id;
    manifest["created"] = iso_now();
    manifest["model"] = model_to_json(model_cfg);
    manifest["train"] = train_to_json(train_cfg);
    manifest["weight_seed"] = weight_seed;
    manifest["data"] = {{"file", data_file},
                        {"fnv64", data_hash},
                        {"count", data_count}};
    manifest["schedule"] = {{"peak", series.schedule.peak},
                            {"final", series.schedule.final_rate},
                            {"warmup", series.schedule.warmup},
                            {"total", series.schedule.total}};
    manifest["lr_record"] = series.lr_record;

    ordered_json files = ordered_json::array();
    for (const auto& [step, state] : series.checkpoints) {
        std::string name = ckpt_filename(step);
        save_checkpoint(dir / name, *state);
        ordered_json f;
        f["step"] = step;
        f["file"] = name;
        f["fnv64"] = checkpoint_file_hash(dir / name);
        files.push_back(std::move(f));
    }
    manifest["checkpoints"] = std::move(files);
    write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

LoadedRun load_run(const fs::path& dir) {
    fs::path manifest_path = dir / "manifest.json";
    ordered_json manifest = ordered_json::parse(read_file(manifest_path), nullptr, false);
    if (manifest.is_discarded())
        fail(Errc::corruption, manifest_path.string() + ": not valid JSON");

    LoadedRun out;
    out.manifest.run_id = manifest.at("run_id").get<std::string>();
    out.manifest.created = manifest.value("created", "");
    out.manifest.model = model_from_json(manifest.at("model"));
    out.manifest.train = train_from_json(manifest.at("train"));
    out.manifest.weight_seed = manifest.at("weight_seed").get<uint64_t>();
    out.manifest.data_file = manifest.at("data").at("file").get<std::string>();
    out.manifest.data_hash = manifest.at("data").at("fnv64").get<uint64_t>();
    out.manifest.data_count = manifest.at("data").at("count").get<size_t>();
    out.manifest.lr_record = manifest.at("lr_record").get<std::vector<double>>();
    out.manifest.schedule.peak = manifest.at("schedule").at("peak").get<double>();
    out.manifest.schedule.final_rate = manifest.at("schedule").at("final").get<double>();
    out.manifest.schedule.warmup = manifest.at("schedule").at("warmup").get<size_t>();
    out.manifest.schedule.total = manifest.at("schedule").at("total").get<size_t>();

    out.series.run_id = out.manifest.run_id;
    out.series.lr_record = out.manifest.lr_record;
    out.series.schedule = out.manifest.schedule;
    for (const auto& f : manifest.at("checkpoints")) {
        uint64_t step = f.at("step").get<uint64_t>();
        std::string name = f.at("file").get<std::string>();
        uint64_t expect = f.at("fnv64").get<uint64_t>();
        fs::path p = dir / name;
        if (!fs::exists(p)) fail(Errc::corruption, "missing checkpoint file " + p.string());
        if (checkpoint_file_hash(p) != expect)
            fail(Errc::corruption, p.string() + ": hash does not match manifest");
        ModelState st = load_checkpoint(p, out.manifest.model);
        if (st.step != step)
            fail(Errc::corruption, p.string() + ": step does not match manifest");
        out.manifest.checkpoint_files.emplace_back(step, name);
        out.manifest.checkpoint_hashes.push_back(expect);
        out.series.checkpoints.emplace_back(step, std::make_shared<ModelState>(std::move(st)));
    }
    if (out.series.checkpoints.empty())
        fail(Errc::corruption, manifest_path.string() + ": run has no checkpoints");
    return out;
}

} // namespace gradtrace
