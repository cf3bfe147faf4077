// Writes a deterministic synthetic multimodal corpus as JSONL, for demos and
// fixtures. Images go inline by default or to sibling .uimg/.ppm files.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "unims/data.hpp"
#include "unims/synthetic.hpp"

namespace fs = std::filesystem;

int main(int argc, char** argv) {
    CLI::App app{"unims-synth: generate a synthetic multimodal corpus"};
    std::string out_path = "dataset.jsonl";
    std::string image_mode = "inline";
    unims::SyntheticSpec spec;
    app.add_option("--out", out_path, "output JSONL path");
    app.add_option("--docs", spec.n_docs, "number of documents");
    app.add_option("--vocab-words", spec.vocab_words, "word types");
    app.add_option("--image-size", spec.image_size, "square image resolution");
    app.add_option("--seed", spec.seed, "generator seed");
    app.add_option("--image-mode", image_mode, "inline|uimg|ppm");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        unims::ModelConfig cfg;
        cfg.image_resolution = spec.image_size;
        unims::SyntheticCorpus corpus = unims::make_synthetic_corpus(spec, cfg);
        fs::path out(out_path);
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        std::ofstream f(out);
        if (!f) throw unims::InputError("synth: cannot write " + out_path);
        for (const auto& doc : corpus.docs) {
            nlohmann::json j = unims::document_to_json(doc);
            if (image_mode != "inline") {
                nlohmann::json images = nlohmann::json::array();
                for (size_t i = 0; i < doc.images.size(); ++i) {
                    std::string name = doc.id + "_img" + std::to_string(i) + "." + image_mode;
                    fs::path img_path = out.parent_path() / name;
                    if (image_mode == "uimg") {
                        unims::write_uimg(doc.images[i], img_path.string());
                    } else if (image_mode == "ppm") {
                        unims::write_ppm(doc.images[i], img_path.string());
                    } else {
                        throw unims::InputError("synth: unknown image mode '" + image_mode + "'");
                    }
                    images.push_back(name);
                }
                j["images"] = images;
            }
            f << j.dump() << "\n";
        }
        std::cout << "synth: wrote " << corpus.docs.size() << " documents to " << out_path << " ("
                  << image_mode << " images)\n";
    } catch (const unims::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
