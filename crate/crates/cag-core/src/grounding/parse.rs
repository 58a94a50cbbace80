//! Parsing of backend response payloads. Responses must be JSON per the
//! prompt contracts; anything else is a parse error with the raw text
//! preserved for diagnostics.

use serde::Deserialize;

use super::GroundingError;

/// Strips a Markdown code fence if the whole payload is fenced.
fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    if let Some(rest) = t.strip_prefix("```") {
        // Drop an optional language tag on the fence line.
        let body = match rest.split_once('\n') {
            Some((_, body)) => body,
            None => rest,
        };
        if let Some(inner) = body.strip_suffix("```") {
            return inner.trim();
        }
    }
    t
}

fn parse_error(reason: impl Into<String>, raw: &str) -> GroundingError {
    GroundingError::Parse { reason: reason.into(), raw: raw.to_string() }
}

/// Parses the word-extraction response: a JSON array of strings.
pub fn parse_words_response(raw: &str) -> Result<Vec<String>, GroundingError> {
    let body = strip_fences(raw);
    serde_json::from_str::<Vec<String>>(body).map_err(|e| parse_error(e.to_string(), raw))
}

#[derive(Deserialize)]
struct BboxPayload {
    id: i64,
    bbox: [f64; 4],
}

/// Parses the localization response: `{"id": int, "bbox": [x1,y1,x2,y2]}`.
pub fn parse_bbox_response(raw: &str) -> Result<(i64, [f64; 4]), GroundingError> {
    let body = strip_fences(raw);
    let payload: BboxPayload =
        serde_json::from_str(body).map_err(|e| parse_error(e.to_string(), raw))?;
    Ok((payload.id, payload.bbox))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_json_array() {
        assert_eq!(parse_words_response(r#"["cat","sofa"]"#).unwrap(), vec!["cat", "sofa"]);
    }

    #[test]
    fn fenced_json_array() {
        let raw = "```json\n[\"cat\"]\n```";
        assert_eq!(parse_words_response(raw).unwrap(), vec!["cat"]);
    }

    #[test]
    fn non_json_is_a_parse_error_with_raw_preserved() {
        let err = parse_words_response("The words are cat and sofa.").unwrap_err();
        match err {
            GroundingError::Parse { raw, .. } => assert!(raw.contains("cat and sofa")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bbox_payload() {
        let (id, bbox) = parse_bbox_response(r#"{"id": 1, "bbox": [10, 20, 110, 220]}"#).unwrap();
        assert_eq!(id, 1);
        assert_eq!(bbox, [10.0, 20.0, 110.0, 220.0]);
    }

    #[test]
    fn bbox_with_wrong_arity_fails() {
        assert!(parse_bbox_response(r#"{"id": 1, "bbox": [10, 20, 110]}"#).is_err());
    }
}
