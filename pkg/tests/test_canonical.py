"""Tests for the canonical text form."""

import math

import pytest

from fracti import canonical
from fracti.errors import CanonicalError


class TestEncode:
    """Tests for encode."""

    def test_map_keys_sorted(self):
        assert canonical.encode({"b": 1, "a": 2}) == "{a=2,b=1}"

    def test_key_order_does_not_change_digest(self):
        assert canonical.tree_digest({"x": 1, "y": [1, 2]}) == canonical.tree_digest({"y": [1, 2], "x": 1})

    def test_scalars(self):
        assert canonical.encode([True, False, 3, -4, 0.5, "hi"]) == '[true,false,3,-4,0.5,"hi"]'

    def test_quoted_keys(self):
        assert canonical.encode({"with space": 1}) == '{"with space"=1}'
        assert canonical.encode({"network.layers": 2}) == "{network.layers=2}"

    def test_special_floats(self):
        assert canonical.encode([math.inf, -math.inf, math.nan]) == "[inf,-inf,nan]"

    def test_shortest_float_repr(self):
        assert canonical.encode(0.1) == "0.1"
        assert canonical.encode(1e-12) == "1e-12"

    def test_tuple_encodes_as_list(self):
        assert canonical.encode((1, 2)) == "[1,2]"

    def test_non_string_key_rejected(self):
        with pytest.raises(CanonicalError):
            canonical.encode({1: "a"})

    def test_unsupported_value_rejected(self):
        with pytest.raises(CanonicalError):
            canonical.encode({"a": object()})

    def test_digest_is_sha256_hex(self):
        value = canonical.digest(b"")
        assert value == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


class TestDecode:
    """Tests for decode."""

    def test_nested_values(self):
        tree = {"a": [1, 2.5, {"b": "c"}], "d": True, "e": {}}
        assert canonical.decode(canonical.encode(tree)) == tree

    def test_whitespace_tolerated(self):
        text = """
        {
            name = "x",
            runs = [ 1, 2 ]
        }
        """
        assert canonical.decode(text) == {"name": "x", "runs": [1, 2]}

    def test_int_and_float_distinguished(self):
        assert canonical.decode("[1,1.0]") == [1, 1.0]
        assert isinstance(canonical.decode("1"), int)
        assert isinstance(canonical.decode("1.0"), float)

    def test_special_floats(self):
        values = canonical.decode("[inf,-inf,nan]")
        assert values[0] == math.inf
        assert values[1] == -math.inf
        assert math.isnan(values[2])

    def test_bytes_input(self):
        assert canonical.decode(b"{a=1}") == {"a": 1}

    def test_trailing_data(self):
        with pytest.raises(CanonicalError):
            canonical.decode("{a=1} x")

    def test_duplicate_key(self):
        with pytest.raises(CanonicalError):
            canonical.decode("{a=1,a=2}")

    def test_missing_equals(self):
        with pytest.raises(CanonicalError):
            canonical.decode("{a 1}")

    def test_unterminated(self):
        with pytest.raises(CanonicalError):
            canonical.decode("[1,2")


class TestTables:
    """Tests for the one-map-per-line tables."""

    def test_append_and_read(self, tmp_path):
        path = tmp_path / "table"
        path.touch()
        canonical.append_row(path, {"b": 2, "a": 1})
        canonical.append_row(path, {"a": 3})
        assert path.read_text().splitlines() == ["{a=1,b=2}", "{a=3}"]
        assert canonical.read_table(path) == [{"a": 1, "b": 2}, {"a": 3}]

    def test_bad_line_reports_location(self, tmp_path):
        path = tmp_path / "table"
        path.write_text("{a=1}\n{a=\n")
        with pytest.raises(CanonicalError, match=":2:"):
            canonical.read_table(path)
