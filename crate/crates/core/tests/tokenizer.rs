use proptest::prelude::*;
use unipact_core::tokenizer::*;

const EXAMPLE: &str = "The demographics information: 30.0 year-old, black African American, female. \
The vital parameters: temperature 36.1, heartrate 88.0, resprate 16.0.";

#[test]
fn answers_are_single_distinct_tokens() {
    let v = build_vocab(["Yes No"], 64).unwrap();
    assert_eq!(v.encode("Yes"), vec![YES]);
    assert_eq!(v.encode("No"), vec![NO]);
    assert_ne!(YES, NO);
    // Forced in even when the corpus never mentions them.
    let v = build_vocab(["nothing here"], 64).unwrap();
    assert_eq!(v.encode("Yes No"), vec![YES, NO]);
}

#[test]
fn reserved_prefix_and_dense_ids() {
    let v = build_vocab([EXAMPLE], 1000).unwrap();
    let expected = ["<pad>", "<unk>", "<bos>", "<eos>", "<ecg>", "Yes", "No"];
    assert_eq!(&v.tokens()[..RESERVED], &expected);
    for (i, t) in v.tokens().iter().enumerate() {
        assert_eq!(v.id(t), Some(i as u32));
    }
}

#[test]
fn frequency_then_lexicographic_order() {
    let v = build_vocab(["b a c c", "a b"], 100).unwrap();
    let rest: Vec<&str> = v.tokens()[RESERVED..].iter().map(String::as_str).collect();
    // a and b both occur twice, c twice too: all ties break lexicographically
    assert_eq!(rest, ["a", "b", "c"]);
    let v = build_vocab(["z z z y y x"], 100).unwrap();
    let rest: Vec<&str> = v.tokens()[RESERVED..].iter().map(String::as_str).collect();
    assert_eq!(rest, ["z", "y", "x"]);
}

#[test]
fn max_size_truncates_and_bounds() {
    let v = build_vocab(["a a a b b c"], RESERVED + 2).unwrap();
    assert_eq!(v.len(), RESERVED + 2);
    assert_eq!(v.encode("c"), vec![UNK]);
    assert!(build_vocab(["a"], RESERVED - 1).is_err());
    assert!(build_vocab(Vec::<String>::new(), 100).is_err());
}

#[test]
fn empty_and_unknown() {
    let v = build_vocab([EXAMPLE], 1000).unwrap();
    assert!(v.encode("").is_empty());
    assert_eq!(v.decode(&[]).unwrap(), "");
    assert_eq!(v.decode(&[YES]).unwrap(), "Yes");
    assert_eq!(v.encode("zebra"), vec![UNK]);
    assert!(v.decode(&[v.len() as u32]).is_err());
    assert_eq!(v.decode(&[PAD, BOS, YES, EOS, ECG_SLOT]).unwrap(), "Yes");
}

#[test]
fn numbers_are_single_tokens() {
    let v = build_vocab([EXAMPLE], 1000).unwrap();
    let ids = v.encode("88.0");
    assert_eq!(ids.len(), 1);
    assert_eq!(v.token(ids[0]), Some("88.0"));
}

#[test]
fn example_prompt_round_trips() {
    let v = build_vocab([EXAMPLE], 1000).unwrap();
    let ids = v.encode(EXAMPLE);
    assert!(!ids.contains(&UNK));
    let back = v.decode(&ids).unwrap();
    let canon = |s: &str| pre_tokenize(s).collect::<Vec<_>>().join(" ");
    assert_eq!(back, canon(EXAMPLE));
    assert_eq!(v.encode(&back), ids);
}

#[test]
fn rebuild_is_byte_identical() {
    let docs: Vec<String> = (0..1000).map(|i| format!("doc {} has value {}.{} and tag t{}", i, i % 97, i % 10, i % 13)).collect();
    let a = build_vocab(&docs, 4096).unwrap();
    let b = build_vocab(&docs, 4096).unwrap();
    assert_eq!(a.to_file_string(), b.to_file_string());
    assert_eq!(a.fingerprint(), b.fingerprint());
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    let v = build_vocab([EXAMPLE], 1000).unwrap();
    v.save(&path).unwrap();
    let w = Vocab::load(&path).unwrap();
    assert_eq!(v, w);
    assert!(Vocab::parse("a\nb\n").is_err());
    std::fs::write(&path, "<pad>\n<unk>\n<bos>\n<eos>\n<ecg>\nYes\nNo\nx\nx\n").unwrap();
    assert!(Vocab::load(&path).is_err());
}

proptest! {
    #[test]
    fn encode_decode_encode_is_encode(words in prop::collection::vec("[a-z]{1,6}|[0-9]{1,3}\\.[0-9]|[,.:?]", 0..40)) {
        let corpus = words.join(" ");
        let v = build_vocab([corpus.as_str(), "Yes No"], 4096).unwrap();
        let text = words.join(" ");
        let ids = v.encode(&text);
        let again = v.encode(&v.decode(&ids).unwrap());
        prop_assert_eq!(again, ids);
    }

    #[test]
    fn round_trip_with_unknown_words(words in prop::collection::vec("[A-Za-z]{1,5}", 0..20), extra in "[A-Za-z ]{0,30}") {
        let v = build_vocab([words.join(" ")], 4096).unwrap();
        let text = format!("{} {}", words.join(" "), extra);
        let ids = v.encode(&text);
        // Unknown pieces become <unk>, which decodes to nothing; the
        // surviving tokens re-encode identically.
        let known: Vec<u32> = ids.iter().copied().filter(|&i| i != UNK).collect();
        prop_assert_eq!(v.encode(&v.decode(&ids).unwrap()), known);
    }

    #[test]
    fn answers_always_single(prefix in "[a-z ]{0,20}") {
        let v = build_vocab([prefix.as_str()], 64).unwrap();
        prop_assert_eq!(v.encode("Yes").len(), 1);
        prop_assert_eq!(v.encode("No").len(), 1);
    }
}
