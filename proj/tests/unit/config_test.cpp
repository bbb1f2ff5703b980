// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "../support/oracles.hpp"
#include "pvt/config.hpp"

using namespace pvt;
using nlohmann::json;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("no error thrown");
    return ErrorCode::IoFailure;
}

UnitIndex only(const std::optional<UnitIndex>& u) {
    REQUIRE(u.has_value());
    return *u;
}

}  // namespace

TEST_CASE("single spec document") {
    IntervenableConfig c =
        parse_config(json::parse(R"({"layer": 0, "component": "mlp_output", "intervention_type": "vanilla"})"));
    REQUIRE(c.size() == 1);
    CHECK(c.mode == Mode::parallel);
    CHECK(c.interventions[0].unit == UnitKind::pos);
    CHECK(c.interventions[0].component == "mlp_output");
    CHECK(c.interventions[0].kind.tag == InterventionKind::Tag::vanilla);
}

TEST_CASE("serial document") {
    IntervenableConfig c = parse_config(json::parse(R"({
        "mode": "serial",
        "interventions": [
            {"layer": 3, "component": "block_output"},
            {"layer": 10, "component": "block_output", "intervention_type": "VanillaIntervention"}
        ]})"));
    CHECK(c.mode == Mode::serial);
    CHECK(c.size() == 2);
    CHECK(c.interventions[1].layer == 10);
}

TEST_CASE("parse errors and staged validation") {
    CHECK(code_of([] { parse_config(json::parse(R"({"intervention_type": "bogus"})")); }) == ErrorCode::UnknownKind);
    CHECK(code_of([] { parse_config(json::parse(R"({"layer": "three"})")); }) == ErrorCode::MalformedDocument);
    CHECK(code_of([] { parse_config(json::parse(R"({"lyer": 3})")); }) == ErrorCode::MalformedDocument);
    CHECK(code_of([] { parse_config_text("{not json"); }) == ErrorCode::MalformedDocument);

    // Unknown sites pass parsing and fail the schema check.
    IntervenableConfig c = parse_config(json::parse(R"({"component": "nonexistent_site"})"));
    CHECK(code_of([&] { check_config(c, testing::toy_transformer()); }) == ErrorCode::UnknownSite);
}

TEST_CASE("schema checks") {
    const ModelSchema tf = testing::toy_transformer();
    IntervenableConfig t_unit = parse_config(json::parse(R"({"component": "block_output", "unit": "t"})"));
    CHECK(code_of([&] { check_config(t_unit, tf); }) == ErrorCode::UnknownSite);

    IntervenableConfig one_serial = parse_config(json::parse(R"({"mode": "serial", "interventions": [{}]})"));
    CHECK(code_of([&] { check_config(one_serial, tf); }) == ErrorCode::SerialOrderViolation);

    IntervenableConfig backwards = parse_config(json::parse(
        R"({"mode": "serial", "interventions": [{"layer": 3}, {"layer": 1}]})"));
    CHECK(code_of([&] { check_config(backwards, tf); }) == ErrorCode::SerialOrderViolation);

    IntervenableConfig wide = parse_config(json::parse(
        R"({"intervention_type": "low_rank_rotated", "low_rank_dimension": 99})"));
    CHECK(code_of([&] { check_config(wide, tf); }) == ErrorCode::DimMismatch);

    IntervenableConfig bad_constant = parse_config(json::parse(
        R"({"intervention_type": "addition", "constant_source": [1, 2, 3]})"));
    CHECK(code_of([&] { check_config(bad_constant, tf); }) == ErrorCode::DimMismatch);

    ModelSchema mlp;
    mlp.kind = ArchKind::mlp;
    mlp.num_layers = 2;
    mlp.hidden_dim = 8;
    IntervenableConfig cell = parse_config(json::parse(R"({"component": "cell_output", "unit": "t"})"));
    CHECK(code_of([&] { check_config(cell, mlp); }) == ErrorCode::UnknownSite);

    IntervenableConfig alias = parse_config(json::parse(R"({"component": "embedding_output"})"));
    CHECK_NOTHROW(check_config(alias, tf));
}

TEST_CASE("config json round trip") {
    IntervenableConfig c = parse_config(json::parse(R"({
        "mode": "parallel",
        "interventions": [
            {"layer": 1, "component": "mlp_activation", "intervention_type": "low_rank_rotated",
             "low_rank_dimension": 2},
            {"layer": 0, "component": "block_input", "intervention_type": "noise", "noise_scale": 0.5,
             "noise_seed": 4},
            {"layer": 2, "intervention_type": "addition", "constant_source": [0.5, 1.5]}
        ]})"));
    const json out = config_to_json(c);
    IntervenableConfig again = parse_config(out);
    CHECK(config_to_json(again) == out);
    CHECK(again.interventions[0].low_rank_dimension == 2);
    CHECK(again.interventions[1].noise_scale == 0.5);
    CHECK(again.interventions[2].constant_source->numel() == 2);
}

TEST_CASE("index tree depth") {
    CHECK(IndexTree(3).depth() == 0);
    CHECK(IndexTree(std::vector<int64_t>{1, 2}).depth() == 1);
    CHECK(IndexTree(std::vector<std::vector<int64_t>>{{1}, {2}}).depth() == 2);
    CHECK(IndexTree::from_json(json::parse("[[[0, 1, 2, 3]]]")).depth() == 3);
    CHECK(IndexTree::from_json(json::parse("[null, [[1]]]")).depth() == 3);
    CHECK(code_of([] { IndexTree::from_json(json::parse("[1, [2]]")).depth(); }) == ErrorCode::IndexShapeMismatch);
    CHECK(code_of([] { IndexTree::from_json(json::parse(R"("x")")); }) == ErrorCode::IndexShapeMismatch);
}

TEST_CASE("scalar shorthand broadcasts") {
    auto r = resolve_indices(IndexTree(3), 1, 1);
    CHECK(only(r[0]) == UnitIndex{{3}});
    auto many = resolve_indices(IndexTree(3), 2, 3);
    REQUIRE(many.size() == 2);
    CHECK(only(many[1]) == UnitIndex{{3}, {3}, {3}});
}

TEST_CASE("flat and batch shorthands") {
    auto flat = resolve_indices(IndexTree(std::vector<int64_t>{1, 4}), 2, 2);
    CHECK(only(flat[0]) == UnitIndex{{1, 4}, {1, 4}});
    auto per_batch = resolve_indices(IndexTree(std::vector<std::vector<int64_t>>{{1}, {2, 3}}), 1, 2);
    CHECK(only(per_batch[0]) == UnitIndex{{1}, {2, 3}});
    CHECK(code_of([] { resolve_indices(IndexTree(std::vector<std::vector<int64_t>>{{1}, {2}}), 1, 3); }) ==
          ErrorCode::IndexShapeMismatch);
}

TEST_CASE("per-intervention form with a link tuple") {
    // ([[[1]],[[3]]], [[[1]],[[3]]]): positions 1 and 3 for the two specs.
    json doc = json::parse(R"({"sources->base": {"source": [[[1]], [[3]]], "base": [[[1]], [[3]]]}})");
    UnitLocations u = resolve_unit_locations(parse_unit_locations(doc), 2, 1);
    const ResolvedLink& link = u.at("sources->base");
    CHECK(only(link.source[0]) == UnitIndex{{1}});
    CHECK(only(link.base[1]) == UnitIndex{{3}});
    CHECK(code_of([&] { resolve_unit_locations(parse_unit_locations(doc), 3, 1); }) ==
          ErrorCode::IndexShapeMismatch);
}

TEST_CASE("source side may be none") {
    LocationLink link = LocationLink::pair(IndexTree(std::vector<IndexTree>{IndexTree::none()}),
                                           IndexTree::from_json(json::parse("[[[0, 1, 2, 3]]]")));
    ResolvedLink r = resolve_link(link, 1, 1);
    CHECK_FALSE(r.source[0].has_value());
    CHECK(only(r.base[0]) == UnitIndex{{0, 1, 2, 3}});
}

TEST_CASE("base key and plain values") {
    UnitLocations u = resolve_unit_locations(parse_unit_locations(json::parse(R"({"base": 3})")), 1, 1);
    CHECK(only(u.at("base").base[0]) == UnitIndex{{3}});
    CHECK_FALSE(u.at("base").source[0].has_value());

    UnitLocations both = resolve_unit_locations(parse_unit_locations(json::parse(R"({"sources->base": [6, 3]})")), 1,
                                                1);
    CHECK(only(both.at("sources->base").source[0]) == UnitIndex{{6, 3}});
}

TEST_CASE("subspace shorthands") {
    auto none = resolve_subspaces(IndexTree::none(), 2, 1);
    CHECK_FALSE(none[1][0].has_value());
    auto flat = resolve_subspaces(IndexTree(std::vector<int64_t>{10, 11, 12}), 1, 2);
    CHECK(*flat[0][1] == std::vector<int64_t>{10, 11, 12});
    auto empty = resolve_subspaces(IndexTree(std::vector<IndexTree>{}), 1, 1);
    REQUIRE(empty[0][0].has_value());
    CHECK(empty[0][0]->empty());
    auto nested = resolve_subspaces(IndexTree::from_json(json::parse("[null, [[0, 1]]]")), 2, 1);
    CHECK_FALSE(nested[0][0].has_value());
    CHECK(*nested[1][0] == std::vector<int64_t>{0, 1});
}
