import itertools

import numpy as np
import pytest

from utils.attributes import (DEFAULT_ATTRIBUTE_COUNT, DEFAULT_BINARY_DIMS, AttributeSchema, AttributeVector,
                              load_attribute_table, pairwise_xor, write_attribute_table, write_schema)
from utils.errors import IndexOutOfRange, ParseError, SchemaMismatch


@pytest.fixture
def two_attr():
    return AttributeSchema((("a", 2), ("b", 3)))


@pytest.mark.parametrize("raw, bits", [((0, 2), [1, 0, 0, 0, 1]), ((1, 0), [0, 1, 1, 0, 0])])
def test_one_hot_encoding(two_attr, raw, bits):
    vector = two_attr.encode(raw)
    assert vector.bits.tolist() == bits
    assert two_attr.decode(vector) == raw


def test_default_schema_expands_to_88(rng):
    schema = AttributeSchema.default()
    assert len(schema) == DEFAULT_ATTRIBUTE_COUNT
    assert schema.total_binary_dims == DEFAULT_BINARY_DIMS
    raw = [int(rng.integers(0, card)) for _, card in schema.attributes]
    vector = schema.encode(raw)
    assert len(vector) == 88
    assert int(vector.bits.sum()) == 15
    assert len(schema.dimension_names()) == 88


def test_binary_attribute_takes_zero_or_one(small_schema):
    assert small_schema.total_binary_dims == 6
    assert small_schema.encode((1, 2, 1)).bits.tolist() == [0, 1, 0, 0, 1, 1]
    assert small_schema.encode((1, 2, 0)).bits.tolist() == [0, 1, 0, 0, 1, 0]


def test_encode_is_injective(small_schema):
    raws = list(itertools.product(range(2), range(3), range(2)))
    encoded = {small_schema.encode(raw) for raw in raws}
    assert len(encoded) == len(raws)


def test_encode_is_injective_on_the_default_schema():
    schema = AttributeSchema.default()
    rng = np.random.default_rng(9)
    limits = [2 if card == 1 else card for _, card in schema.attributes]
    raws = {tuple(int(rng.integers(0, limit)) for limit in limits) for _ in range(2000)}
    assert len({schema.encode(raw) for raw in raws}) == len(raws)


def test_slice_of_covers_one_attribute(two_attr):
    assert two_attr.slice_of("b") == slice(2, 5)
    assert two_attr.encode((1, 1)).bits[two_attr.slice_of("b")].tolist() == [0, 1, 0]


def test_out_of_range_value(two_attr):
    with pytest.raises(IndexOutOfRange):
        two_attr.encode((0, 3))


def test_wrong_length(two_attr):
    with pytest.raises(SchemaMismatch):
        two_attr.encode((0,))


def test_declared_total_must_match():
    with pytest.raises(SchemaMismatch):
        AttributeSchema((("a", 2), ("b", 3)), total_binary_dims=6)


def test_duplicate_names():
    with pytest.raises(SchemaMismatch):
        AttributeSchema((("a", 2), ("a", 3)))


def test_schema_file_round_trip(tmp_path, small_schema):
    write_schema(tmp_path / "schema.txt", small_schema)
    assert AttributeSchema.from_file(tmp_path / "schema.txt") == small_schema


def test_schema_file_parse_error(tmp_path):
    path = tmp_path / "schema.txt"
    path.write_text("# header\ngender,2\nbroken\n")
    with pytest.raises(ParseError) as info:
        AttributeSchema.from_file(path)
    assert info.value.line == 3


class TestPairwiseXor:
    def test_mixed(self):
        pair = pairwise_xor(AttributeVector([1, 0, 1]), AttributeVector([1, 1, 0]))
        assert pair.bits.tolist() == [0, 1, 1]
        assert pair.exclusive_count == 2
        assert pair.exclusive_indices.tolist() == [1, 2]
        assert pair.common_indices.tolist() == [0]
        assert not pair.is_degenerate

    def test_identical(self):
        a = AttributeVector([1, 0, 1, 1])
        pair = pairwise_xor(a, a)
        assert pair.exclusive_count == 0
        assert pair.is_degenerate

    def test_complement(self):
        pair = pairwise_xor(AttributeVector([1, 0, 1]), AttributeVector([0, 1, 0]))
        assert pair.exclusive_count == 3
        assert pair.is_degenerate

    def test_symmetric(self, rng):
        a, b = AttributeVector(rng.integers(0, 2, 20)), AttributeVector(rng.integers(0, 2, 20))
        np.testing.assert_array_equal(pairwise_xor(a, b).bits, pairwise_xor(b, a).bits)

    def test_matches_bitwise_count_on_random_pairs(self):
        rng = np.random.default_rng(31)
        for _ in range(1000):
            a, b = rng.integers(0, 2, size=(2, 88))
            pair = pairwise_xor(AttributeVector(a), AttributeVector(b))
            differing = [k for k in range(88) if a[k] != b[k]]
            assert pair.exclusive_count == len(differing)
            assert pair.exclusive_indices.tolist() == differing
            assert pair.common_indices.tolist() == [k for k in range(88) if a[k] == b[k]]

    def test_length_mismatch(self):
        with pytest.raises(SchemaMismatch):
            pairwise_xor(AttributeVector([1, 0]), AttributeVector([1, 0, 1]))


def test_attribute_table_round_trip(tmp_path, small_schema):
    table = {"0001": (0, 2, 1), "0002": (1, 0, 0)}
    write_attribute_table(tmp_path / "attributes.csv", table, small_schema)
    assert load_attribute_table(tmp_path / "attributes.csv", small_schema) == table


def test_attribute_table_header_mismatch(tmp_path, small_schema):
    (tmp_path / "attributes.csv").write_text("person_id,gender\n0001,1\n")
    with pytest.raises(SchemaMismatch):
        load_attribute_table(tmp_path / "attributes.csv", small_schema)


def test_attribute_table_duplicate_person(tmp_path, small_schema):
    (tmp_path / "attributes.csv").write_text("person_id,gender,upper_color,bag\n0001,1,0,0\n0001,0,1,1\n")
    with pytest.raises(ParseError):
        load_attribute_table(tmp_path / "attributes.csv", small_schema)
