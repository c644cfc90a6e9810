#include "gencrop/losses.hpp"

#include "gencrop/rng.hpp"

#include <doctest.h>

using namespace gencrop;
using ag::Matrix;
using ag::Tape;
using ag::Value;

TEST_CASE("regression l1") {
    CropRect label(0.2, 0.2, 0.8, 0.8);
    CHECK(losses::regression_l1(label, label) == doctest::Approx(0.0));
    CHECK(losses::regression_l1(CropRect(0.3, 0.2, 0.8, 0.8), label) == doctest::Approx(0.025));
    Rng rng(1);
    for (int i = 0; i < 20; ++i) {
        CropRect a(rng.uniform(0, 0.4), rng.uniform(0, 0.4), rng.uniform(0.5, 1), rng.uniform(0.5, 1));
        CropRect b(rng.uniform(0, 0.4), rng.uniform(0, 0.4), rng.uniform(0.5, 1), rng.uniform(0.5, 1));
        CHECK(losses::regression_l1(a, b) == doctest::Approx(losses::regression_l1(b, a)));
    }
}

TEST_CASE("per-anchor l1 mean over all anchors") {
    Tape tape;
    CropRect label(0.2, 0.2, 0.8, 0.8);
    Value label_v = losses::rect_value(tape, label);

    SUBCASE("all proposals equal label") {
        Matrix props(4, 256);
        for (int c = 0; c < 256; ++c) props.col(c) << 0.2, 0.2, 0.8, 0.8;
        Value loss = losses::per_anchor_l1(tape.input(props, false), label_v);
        CHECK(loss.scalar() == doctest::Approx(0.0));
    }
    SUBCASE("one anchor off by 0.4 in one coordinate") {
        Matrix props(4, 256);
        for (int c = 0; c < 256; ++c) props.col(c) << 0.2, 0.2, 0.8, 0.8;
        props(0, 17) += 0.4;
        Value loss = losses::per_anchor_l1(tape.input(props, false), label_v);
        CHECK(loss.scalar() == doctest::Approx(0.4 / (4.0 * 256.0)));
    }
}

TEST_CASE("subject boundary loss cases") {
    CropRect subject(0.4, 0.4, 0.6, 0.6);
    const double margin_x = 0.025 * subject.width();   // 0.005
    const double margin_y = 0.025 * subject.height();

    SUBCASE("all edges clear: zero") {
        CropRect label(0.2, 0.2, 0.8, 0.8);
        CropRect blended(0.25, 0.25, 0.75, 0.75);
        CHECK(losses::subject_boundary_loss(blended, label, subject) == doctest::Approx(0.0));
    }
    SUBCASE("zero clearance on the right: full hinge") {
        CropRect label(0.2, 0.2, 0.8, 0.8);
        CropRect blended(0.2, 0.2, 0.6, 0.8);  // right edge on subject right edge
        CHECK(losses::subject_boundary_loss(blended, label, subject) ==
              doctest::Approx(margin_x));
    }
    SUBCASE("label cuts the subject on the left: left side ungated") {
        CropRect label(0.45, 0.2, 0.8, 0.8);  // label.x1 inside the subject
        CropRect blended(0.41, 0.2, 0.8, 0.8);  // would violate left margin if gated
        CHECK(losses::subject_boundary_loss(blended, label, subject) == doctest::Approx(0.0));
    }
    SUBCASE("continuity at the margin boundary") {
        CropRect label(0.2, 0.2, 0.8, 0.8);
        auto loss_at = [&](double x1) {
            return losses::subject_boundary_loss(CropRect(x1, 0.2, 0.8, 0.8), label, subject);
        };
        const double at_margin = loss_at(0.4 - margin_x);
        CHECK(at_margin == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(loss_at(0.4 - margin_x + 1e-7) == doctest::Approx(1e-7).epsilon(1e-3));
        CHECK(loss_at(0.4 - margin_x - 1e-7) == doctest::Approx(0.0));
    }
}

TEST_CASE("binary cross-entropy") {
    CHECK(losses::binary_ce(1.0, 1.0) == doctest::Approx(0.0).epsilon(1e-5));
    CHECK(losses::binary_ce(0.5, 1.0) == doctest::Approx(std::log(2.0)));
    CHECK(losses::binary_ce(0.5, 0.0) == doctest::Approx(std::log(2.0)));
    CHECK(losses::binary_ce(0.9, 1.0) == doctest::Approx(0.1053605).epsilon(1e-5));
    // extreme scores stay finite via clamping
    CHECK(std::isfinite(losses::binary_ce(0.0, 1.0)));
    CHECK(std::isfinite(losses::binary_ce(1.0, 0.0)));
    // tape version matches scalar version
    Tape tape;
    Value s = tape.scalar(0.73);
    CHECK(losses::binary_ce(s, 1.0).scalar() == doctest::Approx(losses::binary_ce(0.73, 1.0)));
}

TEST_CASE("total loss composition") {
    Tape tape;
    CropRect label(0.2, 0.2, 0.8, 0.8);
    CropRect subject(0.4, 0.4, 0.6, 0.6);
    Matrix blended_m(4, 1);
    blended_m << 0.25, 0.22, 0.78, 0.75;
    Matrix props(4, 2);
    props.col(0) << 0.2, 0.2, 0.8, 0.8;
    props.col(1) << 0.3, 0.3, 0.7, 0.7;
    losses::LossWeights weights;
    weights.per_anchor = 0.1;
    weights.boundary = 1.0;
    losses::LossBreakdown breakdown;
    Value total = losses::total_loss(tape.input(blended_m, false), tape.input(props, false), label,
                                     subject, weights, &breakdown);
    CHECK(breakdown.total == doctest::Approx(breakdown.main_l1 + 0.1 * breakdown.per_anchor_l1 +
                                             1.0 * breakdown.subject_boundary));
    CHECK(total.scalar() == doctest::Approx(breakdown.total));
}

// 2-anchor toy model: blended = softmax(w)-weighted sum of two proposals,
// proposals and weights both differentiable. Checks the full analytic
// gradient of the total loss against central finite differences.
TEST_CASE("total loss gradient matches finite differences on a 2-anchor toy") {
    const CropRect label(0.2, 0.25, 0.8, 0.85);
    const CropRect subject(0.4, 0.45, 0.6, 0.65);
    losses::LossWeights weights;
    weights.per_anchor = 0.1;
    weights.boundary = 1.0;

    // free parameters: 2 proposals (8 values) + 2 raw weights
    Matrix theta(10, 1);
    theta << 0.31, 0.28, 0.71, 0.77,   // proposal 1
             0.25, 0.33, 0.66, 0.72,   // proposal 2
             0.4, -0.3;                // raw blend logits

    auto forward = [&](Tape& tape, Value th) {
        Value p1 = ag::slice_rows(th, 0, 4);
        Value p2 = ag::slice_rows(th, 4, 4);
        Value logits = ag::slice_rows(th, 8, 2);
        Value sm = ag::masked_softmax(logits, {1, 1});
        Value w1 = ag::slice_rows(sm, 0, 1);
        Value w2 = ag::slice_rows(sm, 1, 1);
        Value blended = ag::add(ag::mul_scalarval(p1, w1), ag::mul_scalarval(p2, w2));
        Value proposals = ag::concat_cols({p1, p2});
        return losses::total_loss(blended, proposals, label, subject, weights);
    };

    Tape tape;
    Value th = tape.input(theta, true);
    Value loss = forward(tape, th);
    tape.backward(loss);
    const Matrix analytic = tape.node(th.idx).grad;

    const double h = 1e-7;
    for (int i = 0; i < 10; ++i) {
        Matrix tp = theta, tm = theta;
        tp(i, 0) += h;
        tm(i, 0) -= h;
        Tape tpe, tme;
        const double fp = forward(tpe, tpe.input(tp, true)).scalar();
        const double fm = forward(tme, tme.input(tm, true)).scalar();
        const double numeric = (fp - fm) / (2.0 * h);
        if (std::abs(numeric) > 1e-12) {
            CHECK(std::abs(analytic(i, 0) - numeric) / std::max(1e-4, std::abs(numeric)) < 1e-4);
        } else {
            CHECK(std::abs(analytic(i, 0)) < 1e-8);
        }
    }
}

TEST_CASE("losses are nonnegative with zero at minimizers") {
    Rng rng(77);
    for (int i = 0; i < 50; ++i) {
        CropRect a(rng.uniform(0, 0.4), rng.uniform(0, 0.4), rng.uniform(0.5, 1),
                   rng.uniform(0.5, 1));
        CropRect b(rng.uniform(0, 0.4), rng.uniform(0, 0.4), rng.uniform(0.5, 1),
                   rng.uniform(0.5, 1));
        CHECK(losses::regression_l1(a, b) >= 0.0);
        CHECK(losses::regression_l1(a, a) == doctest::Approx(0.0));
        CropRect subject(0.45, 0.45, 0.55, 0.55);
        CHECK(losses::subject_boundary_loss(a, b, subject) >= 0.0);
        const double s = rng.uniform(0.01, 0.99);
        CHECK(losses::binary_ce(s, 1.0) >= 0.0);
        CHECK(losses::binary_ce(s, 0.0) >= 0.0);
    }
}
