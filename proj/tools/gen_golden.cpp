// Regenerates the committed test fixtures: the pretrained model, golden
// logits for fixed inputs, and pilot-run thresholds. Run manually from the
// repository root when the generator or training recipe changes:
//
//   ./build/tools/gen_golden tests/data

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "bestta/model.hpp"
#include "bestta/simulator.hpp"

using namespace bestta;

int main(int argc, char** argv) {
    const std::string out_dir = argc > 1 ? argv[1] : "tests/data";
    std::filesystem::create_directories(out_dir);

    SourceSpec spec;
    const std::uint64_t seed = 7;
    std::printf("pretraining fixture (seed %llu)...\n", static_cast<unsigned long long>(seed));
    ModelFixture fixture = pretrain(spec, seed);
    std::printf("  train acc %.4f, holdout acc %.4f\n", fixture.train_accuracy,
                fixture.holdout_accuracy);
    save_fixture(fixture, out_dir + "/fixture_default.json");

    nlohmann::json golden;
    golden["fixture_seed"] = seed;
    golden["cases"] = nlohmann::json::array();
    for (int label = 0; label < spec.classes; ++label) {
        const std::uint64_t input_seed = 101 + static_cast<std::uint64_t>(label);
        LabeledSample s = make_sample(input_seed, label, spec);
        std::vector<double> logits = model_forward(fixture.model, s.input, {});
        golden["cases"].push_back(nlohmann::json{
            {"input_seed", input_seed}, {"label", label}, {"logits", logits}});
    }
    std::ofstream out(out_dir + "/golden_logits.json");
    out << golden.dump(2) << "\n";
    std::printf("wrote %s/fixture_default.json and golden_logits.json\n", out_dir.c_str());
    return 0;
}
