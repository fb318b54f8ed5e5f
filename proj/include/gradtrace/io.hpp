#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gradtrace/influence.hpp"
#include "gradtrace/model.hpp"
#include "gradtrace/trainer.hpp"

namespace gradtrace {

// Shortest decimal representation that round-trips the exact f64 value.
std::string format_double(double v);
double parse_double(const std::string& s);

// All writes go through a temp file plus rename so a crash never leaves a
// half-written artifact that loads.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

// JSONL datasets: one object per line with fields id, task, query, response.
// Text rests as UTF-8 strings; tokenization happens at load.
void save_dataset(const std::filesystem::path& path, const std::vector<Example>& data);
std::vector<Example> load_dataset(const std::filesystem::path& path, const ModelConfig& cfg);

// Checkpoint container: magic "GTCK", u32 version, u64 step, named-tensor
// directory, little-endian f64 payload, trailing FNV-1a hash of everything
// before it.
void save_checkpoint(const std::filesystem::path& path, const ModelState& state);
ModelState load_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg);
uint64_t checkpoint_file_hash(const std::filesystem::path& path);

struct TraceRow {
    uint64_t step = 0;
    std::string metric;
    double value = 0.0;
};

// Trace CSV: header "step,metric,value", values in shortest round-trip form.
void save_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& rows);
std::vector<TraceRow> load_trace_csv(const std::filesystem::path& path);

std::vector<TraceRow> trace_rows(const InfluenceTrace& trace);
std::vector<TraceRow> trace_rows(const std::vector<InfluenceTrace>& traces);

// Full-matrix CSV: header "step,probe,eval,value".
void save_matrix_csv(const std::filesystem::path& path, const InfluenceTrace& trace);

// Run directory: manifest.json plus one checkpoint file per saved step. The
// manifest records the config snapshot, data provenance and per-file hashes;
// every file must exist and hash-verify on load.
struct RunManifest {
    std::string run_id;
    std::string created; // ISO-8601, informational only
    ModelConfig model;
    TrainConfig train;
    uint64_t weight_seed = 0;
    std::string data_file;
    uint64_t data_hash = 0;
    size_t data_count = 0;
    std::vector<std::pair<uint64_t, std::string>> checkpoint_files; // (step, filename)
    std::vector<uint64_t> checkpoint_hashes;
    std::vector<double> lr_record;
    LrSchedule schedule;
};

void save_run(const std::filesystem::path& dir, const CheckpointSeries& series,
              const ModelConfig& model_cfg, const TrainConfig& train_cfg, uint64_t weight_seed,
              const std::string& data_file, uint64_t data_hash, size_t data_count);

struct LoadedRun {
    RunManifest manifest;
    CheckpointSeries series;
};

LoadedRun load_run(const std::filesystem::path& dir);

} // namespace gradtrace
