#pragma once

#include <filesystem>
#include <fstream>

#include "transfergrid/models.hpp"
#include "transfergrid/trainer.hpp"

namespace transfergrid {

inline constexpr int kCheckpointFormatVersion = 1;

// Checkpoint = manifest.json (architecture, seeds, optimizer hyperparameters,
// parameter/buffer index) + params.f32 (concatenated little-endian float32
// blobs, parameters first, then buffers in collection order).
inline void save_checkpoint(Model<float>& model, const std::filesystem::path& dir, uint64_t build_seed,
                            const TrainConfig& cfg) {
    std::filesystem::create_directories(dir);
    json manifest;
    manifest["format_version"] = kCheckpointFormatVersion;
    manifest["arch"] = model.spec.to_json();
    manifest["build_seed"] = build_seed;
    manifest["optimizer"] = {{"name", "adamw"},
                             {"learning_rate", cfg.learning_rate},
                             {"weight_decay", cfg.weight_decay},
                             {"beta1", 0.9},
                             {"beta2", 0.999},
                             {"max_epochs", cfg.max_epochs},
                             {"patience", cfg.patience},
                             {"batch_size", cfg.batch_size},
                             {"seed", cfg.seed}};

    json params = json::array(), buffers = json::array();
    size_t offset = 0;
    {
        std::ofstream blob(dir / "params.f32", std::ios::binary | std::ios::trunc);
        if (!blob) throw DataError("cannot open " + (dir / "params.f32").string() + " for writing");
        for (auto* p : model.params()) {
            params.push_back({{"name", p->name}, {"shape", p->value.shape}, {"offset", offset}});
            blob.write(reinterpret_cast<const char*>(p->value.data.data()),
                       static_cast<std::streamsize>(p->value.data.size() * 4));
            offset += p->value.data.size() * 4;
        }
        size_t bi = 0;
        for (auto* b : model.buffers()) {
            buffers.push_back({{"name", "buffer." + std::to_string(bi++)}, {"shape", b->shape}, {"offset", offset}});
            blob.write(reinterpret_cast<const char*>(b->data.data()),
                       static_cast<std::streamsize>(b->data.size() * 4));
            offset += b->data.size() * 4;
        }
        if (!blob) throw DataError("write failure on " + (dir / "params.f32").string());
    }
    manifest["params"] = std::move(params);
    manifest["buffers"] = std::move(buffers);
    std::ofstream mf(dir / "manifest.json", std::ios::binary | std::ios::trunc);
    mf << manifest.dump(2) << "\n";
    if (!mf) throw DataError("write failure on " + (dir / "manifest.json").string());
}

inline Model<float> load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json", std::ios::binary);
    if (!mf) throw DataError("cannot open " + (dir / "manifest.json").string());
    json manifest;
    try {
        mf >> manifest;
    } catch (const std::exception& e) {
        throw DataError("bad checkpoint manifest: " + std::string(e.what()));
    }
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion)
        throw DataError("checkpoint " + dir.string() + ": unsupported format_version");

    const ArchitectureSpec spec = ArchitectureSpec::from_json(manifest.at("arch"));
    Model<float> model = build_model<float>(spec, manifest.at("build_seed").get<uint64_t>());

    std::ifstream blob(dir / "params.f32", std::ios::binary | std::ios::ate);
    if (!blob) throw DataError("cannot open " + (dir / "params.f32").string());
    const size_t payload = static_cast<size_t>(blob.tellg());
    blob.seekg(0);

    auto read_into = [&](std::vector<float>& dst, size_t offset, const Shape& shape, const std::string& name) {
        if (shape_numel(shape) != dst.size())
            throw DataError("checkpoint " + dir.string() + ": shape mismatch for " + name);
        if (offset + dst.size() * 4 > payload)
            throw DataError("checkpoint " + dir.string() + ": blob out of bounds for " + name);
        blob.seekg(static_cast<std::streamoff>(offset));
        blob.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * 4));
        if (static_cast<size_t>(blob.gcount()) != dst.size() * 4)
            throw DataError("checkpoint " + dir.string() + ": short read for " + name);
    };

    auto params = model.params();
    const auto& pindex = manifest.at("params");
    if (pindex.size() != params.size()) throw DataError("checkpoint " + dir.string() + ": parameter count mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& entry = pindex.at(i);
        if (entry.at("name").get<std::string>() != params[i]->name)
            throw DataError("checkpoint " + dir.string() + ": parameter name mismatch at index " +
                            std::to_string(i));
        read_into(params[i]->value.data, entry.at("offset").get<size_t>(),
                  entry.at("shape").get<Shape>(), params[i]->name);
    }
    auto buffers = model.buffers();
    const auto& bindex = manifest.at("buffers");
    if (bindex.size() != buffers.size()) throw DataError("checkpoint " + dir.string() + ": buffer count mismatch");
    for (size_t i = 0; i < buffers.size(); ++i) {
        const auto& entry = bindex.at(i);
        read_into(buffers[i]->data, entry.at("offset").get<size_t>(), entry.at("shape").get<Shape>(),
                  entry.at("name").get<std::string>());
    }
    return model;
}

}  // namespace transfergrid
