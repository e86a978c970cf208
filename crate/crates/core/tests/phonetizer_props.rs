use aratts::phonetizer::{phonetize_str, symbol_table, PhonetizeError, SEPARATOR};
use proptest::prelude::*;

const SHADDA: char = '\u{0651}';
const SUKUN: char = '\u{0652}';
const ALEF: char = '\u{0627}';

fn consonant() -> impl Strategy<Value = char> {
    let letters: Vec<char> = ('\u{0621}'..='\u{064A}').filter(|&c| !matches!(c, ALEF | '\u{0640}' | '\u{0649}')).collect();
    proptest::sample::select(letters)
}

fn short_vowel() -> impl Strategy<Value = char> {
    proptest::sample::select(vec!['\u{064E}', '\u{064F}', '\u{0650}'])
}

fn marks() -> impl Strategy<Value = String> {
    prop_oneof![
        Just(String::new()),
        Just(SUKUN.to_string()),
        Just(SHADDA.to_string()),
        short_vowel().prop_map(|v| v.to_string()),
        short_vowel().prop_map(|v| format!("{SHADDA}{v}")),
        proptest::sample::select(vec!['\u{064B}', '\u{064C}', '\u{064D}']).prop_map(|t| t.to_string()),
        Just(format!("\u{064E}{ALEF}")),
    ]
}

fn word() -> impl Strategy<Value = String> {
    prop::collection::vec((consonant(), marks()), 1..7).prop_map(|parts| parts.into_iter().map(|(c, m)| format!("{c}{m}")).collect())
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..5).prop_map(|w| w.join(" "))
}

fn separator_id() -> usize {
    symbol_table().into_iter().find(|(s, _)| s == SEPARATOR).unwrap().1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn valid_text_always_phonetizes(t in text()) {
        let a = phonetize_str(&t).unwrap();
        prop_assert!(!a.ids().is_empty());
        prop_assert!(a.ids().iter().all(|&id| id < symbol_table().len()));
        prop_assert_eq!(a, phonetize_str(&t).unwrap());
    }

    #[test]
    fn words_concatenate_around_a_separator(t1 in text(), t2 in text()) {
        let whole = phonetize_str(&format!("{t1} {t2}")).unwrap().ids();
        let mut parts = phonetize_str(&t1).unwrap().ids();
        parts.push(separator_id());
        parts.extend(phonetize_str(&t2).unwrap().ids());
        prop_assert_eq!(whole, parts);
    }

    #[test]
    fn shadda_doubles_the_consonant(c in consonant(), v in short_vowel()) {
        let plain = phonetize_str(&format!("{c}{v}")).unwrap().ids();
        let doubled = phonetize_str(&format!("{c}{SHADDA}{v}")).unwrap().ids();
        prop_assert_eq!(doubled.len(), plain.len() + 1);
        prop_assert_eq!(doubled[0], doubled[1]);
        prop_assert_eq!(&doubled[1..], &plain[..]);
    }

    #[test]
    fn latin_letters_are_rejected_at_their_position(prefix in word(), bad in proptest::char::range('a', 'z')) {
        let text = format!("{prefix}{bad}");
        match phonetize_str(&text) {
            Err(PhonetizeError::RejectedCodepoint { position, codepoint }) => {
                prop_assert_eq!(codepoint, bad);
                prop_assert_eq!(position, prefix.chars().count());
            }
            other => prop_assert!(false, "unexpected {:?}", other),
        }
    }
}

#[test]
fn leading_diacritic_is_an_orphan() {
    assert!(matches!(phonetize_str("\u{064E}\u{0628}"), Err(PhonetizeError::OrphanDiacritic(0))));
}

#[test]
fn a_short_phrase() {
    let seq = phonetize_str("كَتَبَ الوَلَدُ").unwrap();
    assert_eq!(seq.to_strings().join(" "), "k a t a b a | aa l w a l a d u");
}
