//! Instruction-reference alignment: extract referential words from an
//! editing instruction via a VLM (or a fixture stub), localize each word to
//! a (reference index, pixel bbox) pair, validate, and cache the result.

mod backend;
mod cache;
mod parse;
mod prompts;

pub use backend::{ImageRef, RemoteVlm, StubFixtures, StubVlm, VlmBackend, VlmEndpoint, VlmMode};
pub use cache::GroundingCache;
pub use parse::{parse_bbox_response, parse_words_response};
pub use prompts::{render_bbox_prompt, render_word_prompt, PROMPT_TEMPLATE_VERSION};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parallel::{map_indexed, Exec};

#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("{0} must be non-empty")]
    EmptyInput(&'static str),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("unparseable backend response ({reason}); raw: {raw:?}")]
    Parse { reason: String, raw: String },
    #[error("stub fixture has no entry for {0:?}")]
    FixtureMissing(String),
    #[error("{what} has length {got}, expected {expected}")]
    ListLength { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("grounding codec error: {0}")]
    Codec(#[from] serde_json::Error),
}

/// A noun from the instruction together with every token span where it
/// occurs (half-open token-index ranges over the tokenized instruction).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferentialWord {
    pub text: String,
    pub token_spans: Vec<(usize, usize)>,
}

/// A validated word-to-region binding: which reference image and which
/// pixel rectangle [x1, y1, x2, y2] the word refers to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grounding {
    pub word: ReferentialWord,
    pub ref_id: usize,
    pub bbox_px: [usize; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Vlm,
    Stub,
    Cache,
}

/// Output of the alignment stage for one instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSet {
    pub instruction: String,
    pub groundings: Vec<Grounding>,
    pub source: Source,
}

/// Words plus per-word diagnostics from the extraction stage.
#[derive(Debug, Clone)]
pub struct ExtractOutcome {
    pub words: Vec<ReferentialWord>,
    pub warnings: Vec<String>,
}

/// Groundings plus per-word diagnostics from the localization stage.
#[derive(Debug, Clone)]
pub struct LocalizeOutcome {
    pub set: GroundingSet,
    pub warnings: Vec<String>,
}

/// Whitespace-and-punctuation tokenizer: tokens are maximal alphanumeric
/// runs, lowercased for matching.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// All token spans where `word` occurs as a whole-word (case-insensitive)
/// match; multi-token words match consecutive token runs.
pub fn find_word_spans(instruction: &str, word: &str) -> Vec<(usize, usize)> {
    let tokens = tokenize(instruction);
    let needle = tokenize(word);
    if needle.is_empty() || needle.len() > tokens.len() {
        return Vec::new();
    }
    let mut spans = Vec::new();
    for start in 0..=tokens.len() - needle.len() {
        if tokens[start..start + needle.len()] == needle[..] {
            spans.push((start, start + needle.len()));
        }
    }
    spans
}

/// Asks the backend for referential words and locates each one in the
/// instruction. Words the backend returns that do not occur in the
/// instruction are dropped with a warning.
pub fn extract_words(
    backend: &dyn VlmBackend,
    instruction: &str,
    images: &[ImageRef],
) -> Result<ExtractOutcome, GroundingError> {
    if instruction.is_empty() {
        return Err(GroundingError::EmptyInput("instruction"));
    }
    let raw = backend.words_response(instruction, images)?;
    let candidates = parse_words_response(&raw)?;

    let mut words = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for cand in candidates {
        if !seen.insert(cand.to_lowercase()) {
            continue;
        }
        let spans = find_word_spans(instruction, &cand);
        if spans.is_empty() {
            warnings.push(format!("word {cand:?} not found in instruction; dropped"));
        } else {
            words.push(ReferentialWord { text: cand, token_spans: spans });
        }
    }
    Ok(ExtractOutcome { words, warnings })
}

/// Asks the backend for a (reference id, bbox) per word and validates the
/// result against the recorded image sizes `(height_px, width_px)`.
/// Out-of-range boxes are clamped; boxes degenerate after clamping and
/// out-of-range reference ids are dropped with a warning.
pub fn localize_words(
    backend: &dyn VlmBackend,
    instruction: &str,
    words: &[ReferentialWord],
    images: &[ImageRef],
    image_sizes: &[(usize, usize)],
) -> Result<LocalizeOutcome, GroundingError> {
    if images.len() != image_sizes.len() {
        return Err(GroundingError::ListLength {
            what: "image_sizes",
            expected: images.len(),
            got: image_sizes.len(),
        });
    }
    let n_refs = images.len();

    // Distinct words are independent backend calls; run them concurrently.
    let raw: Vec<Result<String, GroundingError>> = map_indexed(Exec::Auto, words.len(), |i| {
        backend.bbox_response(&words[i].text, n_refs, images)
    });

    let mut groundings = Vec::new();
    let mut warnings = Vec::new();
    for (word, raw) in words.iter().zip(raw) {
        let (ref_id, bbox) = parse_bbox_response(&raw?)?;
        if ref_id < 0 || ref_id as usize >= n_refs {
            warnings.push(format!(
                "word {:?}: reference id {ref_id} out of range (n_refs={n_refs}); dropped",
                word.text
            ));
            continue;
        }
        let ref_id = ref_id as usize;
        let (h, w) = image_sizes[ref_id];
        match clamp_bbox(bbox, h, w) {
            Some(bbox_px) => groundings.push(Grounding { word: word.clone(), ref_id, bbox_px }),
            None => warnings.push(format!(
                "word {:?}: bbox {bbox:?} degenerate after clamping to {w}x{h}; dropped",
                word.text
            )),
        }
    }

    Ok(LocalizeOutcome {
        set: GroundingSet {
            instruction: instruction.to_string(),
            groundings,
            source: match backend.mode() {
                VlmMode::Remote => Source::Vlm,
                VlmMode::Stub => Source::Stub,
            },
        },
        warnings,
    })
}

/// Clamps a raw bbox to image bounds; `None` if nothing usable remains.
fn clamp_bbox(bbox: [f64; 4], height: usize, width: usize) -> Option<[usize; 4]> {
    let cx = |v: f64| v.round().clamp(0.0, width as f64) as usize;
    let cy = |v: f64| v.round().clamp(0.0, height as f64) as usize;
    let [x1, y1, x2, y2] = bbox;
    let (x1, y1, x2, y2) = (cx(x1), cy(y1), cx(x2), cy(y2));
    if x1 >= x2 || y1 >= y2 {
        return None;
    }
    Some([x1, y1, x2, y2])
}

/// End-to-end alignment: cache lookup, extraction, localization, cache
/// fill. Returns the set plus any warnings from the two stages.
pub fn ground(
    backend: &dyn VlmBackend,
    instruction: &str,
    images: &[ImageRef],
    image_sizes: &[(usize, usize)],
    cache: Option<&GroundingCache>,
) -> Result<(GroundingSet, Vec<String>), GroundingError> {
    let key = match cache {
        Some(c) => {
            let digests: Vec<String> =
                images.iter().map(|i| i.digest()).collect::<Result<_, _>>()?;
            let key = c.key(instruction, &digests, PROMPT_TEMPLATE_VERSION);
            if let Some(mut set) = c.get(&key) {
                set.source = Source::Cache;
                return Ok((set, Vec::new()));
            }
            Some((c, key))
        }
        None => None,
    };

    let extracted = extract_words(backend, instruction, images)?;
    let localized =
        localize_words(backend, instruction, &extracted.words, images, image_sizes)?;
    let mut warnings = extracted.warnings;
    warnings.extend(localized.warnings);

    if let Some((c, key)) = key {
        c.put(&key, &localized.set)?;
    }
    Ok((localized.set, warnings))
}

// --- JSON wire form ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GroundingWire {
    word: String,
    spans: Vec<[usize; 2]>,
    ref_id: usize,
    bbox: [usize; 4],
}

#[derive(Serialize, Deserialize)]
struct GroundingSetWire {
    instruction: String,
    groundings: Vec<GroundingWire>,
    source: Source,
}

impl GroundingSet {
    pub fn to_json(&self) -> String {
        let wire = GroundingSetWire {
            instruction: self.instruction.clone(),
            groundings: self
                .groundings
                .iter()
                .map(|g| GroundingWire {
                    word: g.word.text.clone(),
                    spans: g.word.token_spans.iter().map(|&(s, e)| [s, e]).collect(),
                    ref_id: g.ref_id,
                    bbox: g.bbox_px,
                })
                .collect(),
            source: self.source,
        };
        serde_json::to_string_pretty(&wire).expect("grounding set serializes")
    }

    pub fn from_json(s: &str) -> Result<GroundingSet, serde_json::Error> {
        let wire: GroundingSetWire = serde_json::from_str(s)?;
        Ok(GroundingSet {
            instruction: wire.instruction,
            groundings: wire
                .groundings
                .into_iter()
                .map(|g| Grounding {
                    word: ReferentialWord {
                        text: g.word,
                        token_spans: g.spans.iter().map(|&[s, e]| (s, e)).collect(),
                    },
                    ref_id: g.ref_id,
                    bbox_px: g.bbox,
                })
                .collect(),
            source: wire.source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn stub(words: &[&str], bboxes: &[(&str, i64, [f64; 4])]) -> StubVlm {
        StubVlm::new(StubFixtures {
            words: words.iter().map(|w| w.to_string()).collect(),
            bboxes: bboxes
                .iter()
                .map(|(w, id, b)| (w.to_string(), (*id, *b)))
                .collect::<BTreeMap<_, _>>(),
        })
    }

    #[test]
    fn tokenizer_splits_on_punctuation_and_whitespace() {
        assert_eq!(tokenize("Make the cat, sit!"), vec!["make", "the", "cat", "sit"]);
    }

    #[test]
    fn stub_fixture_extraction() {
        let backend = stub(&["cat", "sofa"], &[]);
        let out = extract_words(&backend, "make the cat sit on the sofa", &[]).unwrap();
        assert_eq!(out.words.len(), 2);
        assert_eq!(out.words[0].text, "cat");
        assert_eq!(out.words[0].token_spans, vec![(2, 3)]);
        assert_eq!(out.words[1].token_spans, vec![(6, 7)]);
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn absent_word_is_dropped_with_warning() {
        let backend = stub(&["dog"], &[]);
        let out = extract_words(&backend, "make the cat sit on the sofa", &[]).unwrap();
        assert!(out.words.is_empty());
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn repeated_word_records_every_span() {
        // Exhaustive scan oracle over the tokenization.
        let instruction = "the cat chases the cat";
        let tokens = tokenize(instruction);
        let expected: Vec<(usize, usize)> = (0..tokens.len())
            .filter(|&i| tokens[i] == "cat")
            .map(|i| (i, i + 1))
            .collect();
        assert_eq!(expected.len(), 2);

        let backend = stub(&["cat"], &[]);
        let out = extract_words(&backend, instruction, &[]).unwrap();
        assert_eq!(out.words.len(), 1);
        assert_eq!(out.words[0].token_spans, expected);
    }

    fn word(text: &str, spans: &[(usize, usize)]) -> ReferentialWord {
        ReferentialWord { text: text.to_string(), token_spans: spans.to_vec() }
    }

    #[test]
    fn localization_accepts_valid_bbox() {
        let backend = stub(&[], &[("cat", 1, [10.0, 20.0, 110.0, 220.0])]);
        let images = vec![ImageRef::unchecked("a.png"), ImageRef::unchecked("b.png")];
        let out = localize_words(
            &backend,
            "the cat",
            &[word("cat", &[(1, 2)])],
            &images,
            &[(512, 512), (512, 512)],
        )
        .unwrap();
        assert_eq!(out.set.groundings.len(), 1);
        let g = &out.set.groundings[0];
        assert_eq!(g.ref_id, 1);
        assert_eq!(g.bbox_px, [10, 20, 110, 220]);
        assert_eq!(out.set.source, Source::Stub);
    }

    #[test]
    fn out_of_range_bbox_is_clamped() {
        let backend = stub(&[], &[("cat", 0, [500.0, 500.0, 600.0, 600.0])]);
        let images = vec![ImageRef::unchecked("a.png")];
        let out = localize_words(&backend, "the cat", &[word("cat", &[(1, 2)])], &images, &[(512, 512)])
            .unwrap();
        assert_eq!(out.set.groundings[0].bbox_px, [500, 500, 512, 512]);
    }

    #[test]
    fn degenerate_bbox_after_clamp_is_dropped() {
        let backend = stub(&[], &[("cat", 0, [600.0, 100.0, 700.0, 200.0])]);
        let images = vec![ImageRef::unchecked("a.png")];
        let out = localize_words(&backend, "the cat", &[word("cat", &[(1, 2)])], &images, &[(512, 512)])
            .unwrap();
        assert!(out.set.groundings.is_empty());
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn bad_ref_id_is_dropped_with_warning() {
        let backend = stub(&[], &[("cat", 7, [0.0, 0.0, 10.0, 10.0])]);
        let images = vec![ImageRef::unchecked("a.png")];
        let out = localize_words(&backend, "the cat", &[word("cat", &[(1, 2)])], &images, &[(512, 512)])
            .unwrap();
        assert!(out.set.groundings.is_empty());
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn grounding_set_json_round_trip() {
        let set = GroundingSet {
            instruction: "the cat".into(),
            groundings: vec![Grounding {
                word: word("cat", &[(1, 2)]),
                ref_id: 0,
                bbox_px: [1, 2, 3, 4],
            }],
            source: Source::Stub,
        };
        let back = GroundingSet::from_json(&set.to_json()).unwrap();
        assert_eq!(back, set);
    }
}
