#include "serforge/cli.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "support/synth.hpp"

using namespace serforge;

namespace {

namespace fs = std::filesystem;

struct CaptureStdout {
  std::ostringstream captured;
  std::streambuf* saved;
  CaptureStdout() : saved(std::cout.rdbuf(captured.rdbuf())) {}
  ~CaptureStdout() { std::cout.rdbuf(saved); }
  std::string str() const { return captured.str(); }
};

struct QuietStderr {
  std::ostringstream sink;
  std::streambuf* saved;
  QuietStderr() : saved(std::cerr.rdbuf(sink.rdbuf())) {}
  ~QuietStderr() { std::cerr.rdbuf(saved); }
};

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// One dataset and small-model config shared across the CLI cases.
struct CliFixture {
  fs::path root;
  synth::DatasetPaths dataset;
  std::string config_path;
  std::string cache_dir;

  CliFixture() {
    root = fs::temp_directory_path() / "serforge_cli_test";
    fs::remove_all(root);
    fs::create_directories(root);
    dataset = synth::generate_dataset((root / "data").string(), 24, 11);
    cache_dir = (root / "cache").string();
    config_path = (root / "small.cfg").string();
    std::ofstream cfg(config_path);
    cfg << "# small-model profile for tests\n"
        << "kernels_per_path = 2\n"
        << "text_filters_per_size = 2\n"
        << "fc1_size = 16\n"
        << "fc2_size = 8\n"
        << "text_fc_size = 8\n"
        << "dropout_rate = 0.25\n"
        << "epochs = 2\n"
        << "batch_size = 8\n"
        << "early_stop_patience = -1\n";
  }
  ~CliFixture() { fs::remove_all(root); }
};

}  // namespace

TEST_CASE_METHOD(CliFixture, "cli end to end", "[cli]") {
  QuietStderr quiet;

  SECTION("featurize writes one cache file per utterance per kind, idempotently") {
    std::string first_out;
    {
      CaptureStdout capture;
      REQUIRE(cli::run({"featurize", "--manifest", dataset.manifest, "--cache-dir",
                        cache_dir, "--kinds", "spec,mfcc"}) == 0);
      first_out = capture.str();
    }
    REQUIRE(first_out.find("48 written") != std::string::npos);

    std::size_t cache_files = 0;
    for (const auto& entry : fs::directory_iterator(cache_dir)) {
      (void)entry;
      ++cache_files;
    }
    REQUIRE(cache_files == 48);  // 24 utterances x 2 kinds

    {
      CaptureStdout capture;
      REQUIRE(cli::run({"featurize", "--manifest", dataset.manifest, "--cache-dir",
                        cache_dir, "--kinds", "spec,mfcc"}) == 0);
      REQUIRE(capture.str().find("0 written") != std::string::npos);
      REQUIRE(capture.str().find("48 up-to-date") != std::string::npos);
    }

    SECTION("spec cache headers carry dims 128 x 256") {
      std::ifstream f(cli::cache_path(cache_dir, "synth0", cli::FeatureKind::kSpec),
                      std::ios::binary);
      REQUIRE(f.good());
      const auto dims = featurize::peek_feature_dims(f, "synth0");
      REQUIRE(dims == std::vector<std::size_t>{128, 256});
    }
  }

  SECTION("train/xval/predict flow") {
    CaptureStdout capture;
    REQUIRE(cli::run({"featurize", "--manifest", dataset.manifest, "--cache-dir",
                      cache_dir, "--embeddings", dataset.embeddings}) == 0);

    const std::string ckpt = (root / "m3.serm").string();
    const std::string loss_a = (root / "loss_a.csv").string();
    const std::string loss_b = (root / "loss_b.csv").string();

    SECTION("checkpoints self-describe their variant and loss logs are seeded") {
      REQUIRE(cli::run({"train", "--manifest", dataset.manifest, "--cache-dir",
                        cache_dir, "--variant", "m3", "--config", config_path,
                        "--seed", "7", "--checkpoint", ckpt, "--loss-log",
                        loss_a}) == 0);
      REQUIRE(models::peek_checkpoint_variant(ckpt) == models::ModelVariant::kM3Mfcc);

      const std::string csv = slurp(loss_a);
      REQUIRE(csv.rfind("epoch,loss,train_accuracy\n", 0) == 0);
      REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 3);  // header + 2 epochs

      REQUIRE(cli::run({"train", "--manifest", dataset.manifest, "--cache-dir",
                        cache_dir, "--variant", "m3", "--config", config_path,
                        "--seed", "7", "--checkpoint", ckpt, "--loss-log",
                        loss_b}) == 0);
      REQUIRE(slurp(loss_a) == slurp(loss_b));  // identical seeds, identical CSV

      SECTION("predict emits a label and unit-sum probabilities, repeatably") {
        const std::string wav = (fs::path(dataset.dir) / "wav" / "synth1.wav").string();
        std::string outputs[2];
        for (int round = 0; round < 2; ++round) {
          CaptureStdout predict_capture;
          REQUIRE(cli::run({"predict", "--checkpoint", ckpt, "--wav", wav,
                            "--config", config_path}) == 0);
          outputs[round] = predict_capture.str();
        }
        REQUIRE(outputs[0] == outputs[1]);
        REQUIRE(outputs[0].find("prediction: ") != std::string::npos);

        double probs[4];
        const auto pos = outputs[0].find("neutral=");
        REQUIRE(pos != std::string::npos);
        REQUIRE(std::sscanf(outputs[0].c_str() + pos,
                            "neutral=%lf happiness=%lf sadness=%lf anger=%lf",
                            &probs[0], &probs[1], &probs[2], &probs[3]) == 4);
        REQUIRE(std::abs(probs[0] + probs[1] + probs[2] + probs[3] - 1.0) <= 1e-6);
      }
    }

    SECTION("xval writes a schema-complete report with k folds") {
      const std::string report = (root / "report.json").string();
      REQUIRE(cli::run({"xval", "--manifest", dataset.manifest, "--cache-dir",
                        cache_dir, "--variant", "m3", "--config", config_path, "--k",
                        "2", "--seed", "3", "--report", report}) == 0);
      const nlohmann::json j = nlohmann::json::parse(slurp(report));
      REQUIRE(j.contains("overall_accuracy"));
      REQUIRE(j.contains("class_accuracy"));
      REQUIRE(j.at("confusion").size() == 4);
      REQUIRE(j.at("per_fold").size() == 2);
      REQUIRE(j.at("n_examples") == 24);
      for (const auto& row : j.at("confusion")) {
        double sum = 0.0;
        for (const auto& cell : row) sum += cell.get<double>();
        REQUIRE(std::abs(sum - 100.0) <= 0.01);
      }
      const std::string table = capture.str();
      REQUIRE(table.find("Confusion matrix in percentage") != std::string::npos);
    }

    SECTION("text-variant training without text caches names the missing kind") {
      const std::string bare_cache = (root / "bare_cache").string();
      REQUIRE(cli::run({"featurize", "--manifest", dataset.manifest, "--cache-dir",
                        bare_cache, "--kinds", "mfcc"}) == 0);
      REQUIRE(cli::run({"train", "--manifest", dataset.manifest, "--cache-dir",
                        bare_cache, "--variant", "m4c", "--config", config_path}) ==
              cli::kExitData);
    }

    SECTION("empty transcript predicts without crashing on a text variant") {
      const std::string m1_ckpt = (root / "m1.serm").string();
      REQUIRE(cli::run({"train", "--manifest", dataset.manifest, "--cache-dir",
                        cache_dir, "--variant", "m1", "--config", config_path,
                        "--checkpoint", m1_ckpt}) == 0);
      const std::string wav = (fs::path(dataset.dir) / "wav" / "synth2.wav").string();
      CaptureStdout predict_capture;
      REQUIRE(cli::run({"predict", "--checkpoint", m1_ckpt, "--wav", wav,
                        "--transcript", "", "--embeddings", dataset.embeddings,
                        "--config", config_path}) == 0);
      REQUIRE(predict_capture.str().find("prediction: ") != std::string::npos);

      SECTION("a text variant without --transcript is a usage error") {
        REQUIRE(cli::run({"predict", "--checkpoint", m1_ckpt, "--wav", wav,
                          "--embeddings", dataset.embeddings, "--config",
                          config_path}) == cli::kExitUsage);
      }
    }
  }

  SECTION("config precedence: flags beat the config file") {
    CaptureStdout capture;
    REQUIRE(cli::run({"featurize", "--manifest", dataset.manifest, "--cache-dir",
                      cache_dir, "--kinds", "mfcc"}) == 0);
    const std::string loss = (root / "loss_three.csv").string();
    REQUIRE(cli::run({"train", "--manifest", dataset.manifest, "--cache-dir",
                      cache_dir, "--variant", "m3", "--config", config_path,
                      "--epochs", "3", "--loss-log", loss}) == 0);
    const std::string csv = slurp(loss);
    REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 4);
  }

  SECTION("error taxonomy") {
    SECTION("unknown config key") {
      std::ofstream bad((root / "bad.cfg").string());
      bad << "not_a_key = 1\n";
      bad.close();
      REQUIRE(cli::run({"train", "--manifest", dataset.manifest, "--config",
                        (root / "bad.cfg").string()}) == cli::kExitUsage);
    }
    SECTION("unknown flag") {
      REQUIRE(cli::run({"train", "--bogus"}) == cli::kExitUsage);
    }
    SECTION("missing manifest file") {
      REQUIRE(cli::run({"train", "--manifest", (root / "nope.jsonl").string()}) ==
              cli::kExitData);
    }
    SECTION("finetune_embeddings rejected") {
      std::ofstream bad((root / "finetune.cfg").string());
      bad << "finetune_embeddings = true\n";
      bad.close();
      REQUIRE(cli::run({"train", "--manifest", dataset.manifest, "--cache-dir",
                        cache_dir, "--config", (root / "finetune.cfg").string()}) ==
              cli::kExitUsage);
    }
  }
}

TEST_CASE("gradcheck command reports per-layer and per-variant errors", "[cli]") {
  QuietStderr quiet;
  CaptureStdout capture;
  REQUIRE(cli::run({"gradcheck", "--gradcheck-variant", "m1", "--seed", "5"}) == 0);
  const std::string out = capture.str();
  REQUIRE(out.find("conv2d") != std::string::npos);
  REQUIRE(out.find("model m1") != std::string::npos);
  REQUIRE(out.find("FAIL") == std::string::npos);
}
