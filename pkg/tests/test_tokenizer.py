import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irflow.tokenizer import CLS, MASK, PAD, SEP, UNK, EmptyCorpus, Tokenizer, train_bpe


class TestTrainBpe:
    def test_specials_first(self):
        tok = train_bpe(["add i32 %a, %b"], 30)
        assert tok.id_to_token[:5] == ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
        assert (PAD, UNK, CLS, SEP, MASK) == (0, 1, 2, 3, 4)

    def test_first_merge_is_most_frequent_pair(self):
        # "ab" occurs 3 times, every other pair at most twice
        tok = train_bpe(["ab ab ab cd"], 5 + 6 + 1)
        assert tok.merges[0] == ("a", "b")

    def test_ties_broken_lexicographically(self):
        tok = train_bpe(["xy ba"], 5 + 5 + 1)
        # pairs (x,y), (b,a), (' ',b) each once; smallest pair wins
        assert tok.merges[0] == (" ", "b")

    def test_vocab_size_reached(self, callpair_text):
        tok = train_bpe([callpair_text], 120)
        assert tok.vocab_size == 120

    def test_stops_when_no_pairs_remain(self):
        tok = train_bpe(["ab"], 100)
        assert tok.merges == [("a", "b")]
        assert tok.vocab_size == 5 + 2 + 1

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpus):
            train_bpe([], 100)

    def test_vocab_below_base(self):
        with pytest.raises(ValueError):
            train_bpe(["abcdef"], 6)

    def test_deterministic(self, callpair_text):
        a = train_bpe([callpair_text], 120)
        b = train_bpe([callpair_text], 120)
        assert a.merges == b.merges


class TestEncode:
    def test_cls_prefix_and_truncation(self, small_tokenizer):
        ids = small_tokenizer.encode("%v2 = icmp slt i32 %v1, %v0", 4)
        assert ids[0] == CLS and len(ids) == 4

    def test_unseen_byte_is_unk(self):
        tok = train_bpe(["aaa"], 10)
        assert tok.tokenize("z") == [UNK]

    def test_decode_roundtrip(self, small_tokenizer, callpair_graph):
        text = callpair_graph.bb_nodes[4].text
        assert small_tokenizer.decode(small_tokenizer.tokenize(text)) == text

    def test_save_load(self, small_tokenizer, tmp_path):
        small_tokenizer.save(tmp_path / "t.json")
        again = Tokenizer.load(tmp_path / "t.json")
        assert again.merges == small_tokenizer.merges
        assert again.encode("br label %v1", 64) == small_tokenizer.encode("br label %v1", 64)


@settings(max_examples=50, deadline=None)
@given(st.text(alphabet="%v0123 =,adeilnrt\n", max_size=60))
def test_roundtrip_property(text):
    # every character of the alphabet occurs in the training text
    tok = train_bpe(["%v0 = add i32 %v1, 1\nret i32 %v0 label entry\n"], 60)
    assert tok.decode(tok.tokenize(text)) == text
