#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "fixtures.hpp"
#include "transfergrid/gradcheck.hpp"
#include "transfergrid/models.hpp"
#include "transfergrid/synthgen.hpp"
#include "transfergrid/trainer.hpp"

using namespace transfergrid;
using namespace tgtest;

namespace {

// Gaussian blobs: class 0 centered at +sep on every coordinate, class 1 at
// -sep; flip_labels swaps the assignment without touching the inputs.
ArraySet<float> blob_set(size_t n_per_class, size_t c, size_t m, double sep, uint64_t seed, bool flip_labels) {
    ArraySet<float> set;
    set.n_classes = 2;
    const size_t n = 2 * n_per_class;
    set.inputs = Tensor<float>({n, 1, c, m});
    Rng rng(seed);
    for (size_t i = 0; i < n; ++i) {
        const size_t label = i % 2;
        const double mean = label == 0 ? sep : -sep;
        for (size_t ch = 0; ch < c; ++ch)
            for (size_t t = 0; t < m; ++t) set.inputs.at4(i, 0, ch, t) = static_cast<float>(rng.normal(mean, 1.0));
        set.labels.push_back(flip_labels ? 1 - label : label);
        set.subjects.push_back("b" + std::to_string(i % 4));
    }
    return set;
}

SequentialModule<float> micro_model(size_t c, size_t m, uint64_t seed) {
    SequentialModule<float> model;
    model.seq.template add<Flatten<float>>();
    auto& head = model.seq.template add<Affine<float>>("head", c * m, 2);
    Rng rng(derive_seed(seed, "init"));
    xavier_init(head.weight(), rng);
    return model;
}

ArchitectureSpec eegnet_tiny() {
    ArchitectureSpec spec;
    spec.kind = ArchKind::eegnet;
    spec.m = 64;
    spec.c = 4;
    spec.n_classes = 2;
    spec.sampling_rate = 64;
    return spec;
}

}  // namespace

TEST_CASE("class weights are inverse frequencies") {
    const auto balanced = class_weights_from_labels({0, 1, 0, 1}, 2);
    CHECK(balanced[0] == 1.0);
    CHECK(balanced[1] == 1.0);
    const auto skewed = class_weights_from_labels({0, 0, 0, 1}, 2);
    CHECK(skewed[0] == Catch::Approx(2.0 / 3).epsilon(1e-12));
    CHECK(skewed[1] == Catch::Approx(2.0).epsilon(1e-12));
    CHECK_THROWS_AS(class_weights_from_labels({0, 0, 0}, 2), DataError);
}

TEST_CASE("balanced cross-entropy has the textbook values") {
    SECTION("uniform scores give log K") {
        Tensor<float> scores({4, 2});
        const double loss = balanced_cross_entropy(scores, {0, 1, 0, 1}, {1.0, 1.0});
        CHECK(loss == Catch::Approx(std::log(2.0)).epsilon(1e-12));
        Tensor<float> three({3, 3});
        CHECK(balanced_cross_entropy(three, {0, 1, 2}, {1.0, 1.0, 1.0}) ==
              Catch::Approx(std::log(3.0)).epsilon(1e-7));
    }
    SECTION("confident correct predictions cost nothing") {
        Tensor<float> scores({1, 2});
        scores.data = {50.0f, 0.0f};
        CHECK(balanced_cross_entropy(scores, {0}, {1.0, 1.0}) < 1e-20);
    }
    SECTION("unit weights reduce to the plain mean") {
        Tensor<double> scores({6, 3});
        Rng rng(3);
        for (auto& v : scores.data) v = rng.uniform(-2, 2);
        const std::vector<size_t> labels = {0, 1, 2, 0, 1, 2};
        const auto w = class_weights_from_labels(labels, 3);
        CHECK(w == std::vector<double>{1.0, 1.0, 1.0});
        double plain = 0;
        for (size_t i = 0; i < 6; ++i) {
            double lse = 0, mx = std::max({scores.data[i * 3], scores.data[i * 3 + 1], scores.data[i * 3 + 2]});
            for (size_t k = 0; k < 3; ++k) lse += std::exp(scores.data[i * 3 + k] - mx);
            plain += mx + std::log(lse) - scores.data[i * 3 + labels[i]];
        }
        plain /= 6;
        CHECK(balanced_cross_entropy(scores, labels, w) == Catch::Approx(plain).epsilon(1e-12));
    }
    SECTION("analytic gradient matches finite differences") {
        Tensor<double> scores({3, 3});
        Rng rng(7);
        for (auto& v : scores.data) v = rng.uniform(-1.5, 1.5);
        const std::vector<size_t> labels = {0, 2, 1};
        const std::vector<double> weights = {1.0, 2.0, 0.5};
        Tensor<double> grad;
        balanced_cross_entropy(scores, labels, weights, &grad);
        const double h = 1e-6;
        for (size_t i = 0; i < scores.numel(); ++i) {
            const double saved = scores.data[i];
            scores.data[i] = saved + h;
            const double lp = balanced_cross_entropy(scores, labels, weights);
            scores.data[i] = saved - h;
            const double lm = balanced_cross_entropy(scores, labels, weights);
            scores.data[i] = saved;
            CHECK(grad.data[i] == Catch::Approx((lp - lm) / (2 * h)).margin(1e-8));
        }
        // Softmax gradient rows sum to zero.
        for (size_t i = 0; i < 3; ++i)
            CHECK(std::abs(grad.data[i * 3] + grad.data[i * 3 + 1] + grad.data[i * 3 + 2]) < 1e-12);
    }
    SECTION("shape mismatches are rejected") {
        Tensor<float> scores({2, 2});
        CHECK_THROWS_AS(balanced_cross_entropy(scores, {0}, {1.0, 1.0}), std::invalid_argument);
        CHECK_THROWS_AS(balanced_cross_entropy(scores, {0, 1}, {1.0}), std::invalid_argument);
    }
}

TEST_CASE("argmax breaks ties toward the lowest class") {
    Tensor<float> scores({2, 3});
    scores.data = {1.0f, 1.0f, 0.0f, 0.5f, 0.7f, 0.7f};
    CHECK(argmax_rows(scores) == std::vector<size_t>{0, 1});
}

TEST_CASE("balanced accuracy averages per-class recall") {
    CHECK(balanced_accuracy({0, 0, 1, 0}, {0, 0, 1, 1}, 2) == 0.75);
    CHECK(balanced_accuracy({0, 1, 1, 0}, {0, 1, 1, 0}, 2) == 1.0);
    CHECK(balanced_accuracy({0, 0, 0, 0, 0, 0}, {0, 0, 0, 0, 1, 1}, 2) == 0.5);  // majority guessing
    CHECK_THROWS_AS(balanced_accuracy({0, 0}, {0, 0}, 2), DataError);

    // Invariant under a consistent relabeling of classes.
    const std::vector<size_t> labels = {0, 1, 1, 2, 2, 0};
    const std::vector<size_t> preds = {0, 1, 2, 2, 1, 0};
    const size_t perm[3] = {2, 0, 1};
    std::vector<size_t> labels2, preds2;
    for (size_t l : labels) labels2.push_back(perm[l]);
    for (size_t p : preds) preds2.push_back(perm[p]);
    CHECK(balanced_accuracy(preds, labels, 3) == Catch::Approx(balanced_accuracy(preds2, labels2, 3)));
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    cfg.learning_rate = 0;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
    cfg = TrainConfig{};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
    cfg = TrainConfig{};
    cfg.patience = cfg.max_epochs + 1;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
}

TEST_CASE("early stopping fires after patience non-improving epochs") {
    // Validation labels are inverted, so every training step makes validation
    // strictly worse: epoch 0 is the best and epoch 1 trips patience = 1.
    auto model = micro_model(2, 8, 1);
    const ArraySet<float> train = blob_set(16, 2, 8, 1.0, 10, false);
    const ArraySet<float> val = blob_set(8, 2, 8, 1.0, 11, true);
    TrainConfig cfg;
    cfg.learning_rate = 0.05;
    cfg.max_epochs = 10;
    cfg.patience = 1;
    cfg.batch_size = 8;
    cfg.seed = 2;
    const TrainReport report = fit(model, train, val, cfg);
    REQUIRE(report.n_epochs() == 2);
    CHECK(report.best_epoch == 0);
    CHECK(report.stop_reason == "early_stopping");
    CHECK(report.val_loss[1] >= report.val_loss[0]);

    // Restoration: re-evaluating validation loss reproduces the best epoch.
    const auto weights = class_weights_from_labels(train.labels, 2);
    const double restored = detail::eval_loss(model, val, weights, cfg.batch_size);
    CHECK(restored == Catch::Approx(report.val_loss[report.best_epoch]).epsilon(1e-12));
}

TEST_CASE("fit reaches max epochs when validation keeps improving") {
    auto model = micro_model(2, 8, 3);
    const ArraySet<float> train = blob_set(16, 2, 8, 1.0, 20, false);
    const ArraySet<float> val = blob_set(8, 2, 8, 1.0, 21, false);
    TrainConfig cfg;
    cfg.learning_rate = 0.01;
    cfg.max_epochs = 5;
    cfg.patience = 5;
    cfg.batch_size = 8;
    const TrainReport report = fit(model, train, val, cfg);
    CHECK(report.n_epochs() == 5);
    CHECK(report.stop_reason == "max_epochs");

    // Restored parameters correspond to the minimum of the val-loss curve.
    double min_loss = report.val_loss[0];
    for (double v : report.val_loss) min_loss = std::min(min_loss, v);
    CHECK(report.val_loss[report.best_epoch] == min_loss);
    const auto weights = class_weights_from_labels(train.labels, 2);
    CHECK(detail::eval_loss(model, val, weights, cfg.batch_size) ==
          Catch::Approx(min_loss).epsilon(1e-12));
}

TEST_CASE("fit decodes a separable synthetic task") {
    const CohortSpec spec = easy_cohort(6, 64, 4, 64, 10.0);
    const auto cohort = generate_cohort(spec, 12, 31);
    const TaskDataset& ds = cohort.at("alpha");
    const AlignedSplitPlan plan = manual_plan(ds.subjects, 4, 1);
    const auto train = make_array_set(ds, plan.folds[0].train_subjects);
    const auto val = make_array_set(ds, plan.folds[0].val_subjects);
    const auto test = make_array_set(ds, plan.folds[0].test_subjects);

    Model<float> model = build_model<float>(eegnet_tiny(), 77);
    TrainConfig cfg;
    cfg.learning_rate = 2e-3;
    cfg.max_epochs = 60;
    cfg.patience = 20;
    cfg.batch_size = 32;
    cfg.seed = 77;
    SubjectUsageLog usage;
    const TrainReport report = fit(model, train, val, cfg, &usage);

    CHECK(report.train_loss.back() < report.train_loss.front());
    const EvalReport eval = evaluate(model, test, cfg.batch_size);
    INFO("test balanced accuracy " << eval.balanced_acc);
    CHECK(eval.balanced_acc > 0.95);

    // Gradient audit saw exactly the training subjects.
    const std::set<std::string> expected(plan.folds[0].train_subjects.begin(), plan.folds[0].train_subjects.end());
    CHECK(usage.gradient_subjects == expected);

    // Evaluation is deterministic.
    const EvalReport again = evaluate(model, test, cfg.batch_size);
    CHECK(again.balanced_acc == eval.balanced_acc);
    CHECK(again.per_subject_acc == eval.per_subject_acc);
}

TEST_CASE("shuffled labels stay near chance") {
    const CohortSpec spec = easy_cohort(6, 64, 4, 64, 10.0);
    const auto cohort = generate_cohort(spec, 12, 41);
    TaskDataset ds = cohort.at("alpha");
    Rng rng(derive_seed(41, "shuffle"));
    std::vector<size_t> labels;
    for (const auto& t : ds.trials) labels.push_back(t.label);
    rng.shuffle(labels);
    for (size_t i = 0; i < labels.size(); ++i) ds.trials[i].label = labels[i];

    const AlignedSplitPlan plan = manual_plan(ds.subjects, 3, 1);
    const auto train = make_array_set(ds, plan.folds[0].train_subjects);
    const auto val = make_array_set(ds, plan.folds[0].val_subjects);
    const auto test = make_array_set(ds, plan.folds[0].test_subjects);

    Model<float> model = build_model<float>(eegnet_tiny(), 13);
    TrainConfig cfg;
    cfg.learning_rate = 2e-3;
    cfg.max_epochs = 30;
    cfg.patience = 10;
    cfg.batch_size = 32;
    cfg.seed = 13;
    fit(model, train, val, cfg);
    const EvalReport eval = evaluate(model, test, cfg.batch_size);
    INFO("shuffled-label balanced accuracy " << eval.balanced_acc);
    CHECK(eval.balanced_acc > 0.30);
    CHECK(eval.balanced_acc < 0.70);
}

TEST_CASE("exploding learning rates raise a divergence error") {
    auto model = micro_model(2, 8, 5);
    const ArraySet<float> train = blob_set(8, 2, 8, 1.0, 30, false);
    const ArraySet<float> val = blob_set(4, 2, 8, 1.0, 31, false);
    TrainConfig cfg;
    cfg.learning_rate = 1e6;
    cfg.max_epochs = 100;
    cfg.patience = 100;
    cfg.batch_size = 16;
    CHECK_THROWS_AS(fit(model, train, val, cfg), TrainingDivergence);
}

TEST_CASE("fit rejects empty splits") {
    const CohortSpec spec = easy_cohort(3, 64, 4, 64, 0.0);
    const auto cohort = generate_cohort(spec, 2, 1);
    const TaskDataset& ds = cohort.at("alpha");
    const auto full = make_array_set(ds, ds.subjects);
    const auto empty = make_array_set(ds, {});
    Model<float> model = build_model<float>(eegnet_tiny(), 1);
    TrainConfig cfg;
    CHECK_THROWS_AS(fit(model, empty, full, cfg), DataError);
    CHECK_THROWS_AS(fit(model, full, empty, cfg), DataError);
}

TEST_CASE("evaluate with a silent head guesses the first class") {
    const CohortSpec spec = easy_cohort(3, 64, 4, 64, 0.0);
    const auto cohort = generate_cohort(spec, 4, 2);
    const auto set = make_array_set(cohort.at("alpha"), cohort.at("alpha").subjects);
    Model<float> model = build_model<float>(eegnet_tiny(), 9);
    model.head->weight().value.zero();
    model.head->bias().value.zero();
    const EvalReport eval = evaluate(model, set);
    CHECK(eval.balanced_acc == 0.5);
    CHECK(eval.per_class_recall == std::vector<double>{1.0, 0.0});
    CHECK_THROWS_AS(evaluate(model, make_array_set(cohort.at("alpha"), {})), DataError);
}
