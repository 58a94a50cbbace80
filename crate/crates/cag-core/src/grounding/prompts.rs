//! Prompt templates for the two alignment subtasks. Rendering is
//! deterministic; bump [`PROMPT_TEMPLATE_VERSION`] on any wording change so
//! cached groundings are invalidated.

use super::GroundingError;

pub const PROMPT_TEMPLATE_VERSION: u32 = 1;

/// Prompt asking for the instruction words that are visually grounded in
/// one of the reference images. Expects a JSON array of words back.
pub fn render_word_prompt(instruction: &str, n_refs: usize) -> Result<String, GroundingError> {
    if instruction.is_empty() {
        return Err(GroundingError::EmptyInput("instruction"));
    }
    let quoted = serde_json::to_string(instruction).expect("strings serialize");
    Ok(format!(
        "You are given {n_refs} reference image(s) and an image-editing instruction.\n\
         List every noun in the instruction that refers to visual content shown in one of the \
         reference images.\n\
         Reply with a JSON array containing each such word exactly as it appears in the \
         instruction, e.g. [\"word1\", \"word2\"]. Reply with [] if there is none.\n\
         Reply with JSON only, no other text.\n\
         Instruction: {quoted}"
    ))
}

/// Prompt asking which reference image contains `word` and where. Expects
/// `{"id": <index>, "bbox": [x1, y1, x2, y2]}` back, in pixels of that image.
pub fn render_bbox_prompt(word: &str, n_refs: usize) -> Result<String, GroundingError> {
    if word.is_empty() {
        return Err(GroundingError::EmptyInput("word"));
    }
    let quoted = serde_json::to_string(word).expect("strings serialize");
    Ok(format!(
        "You are given {n_refs} reference image(s), numbered starting from 0.\n\
         Find the single region that best depicts the word {quoted}.\n\
         Reply with a JSON object {{\"id\": <reference image index>, \"bbox\": [x1, y1, x2, y2]}} \
         where the bbox holds the pixel coordinates of the top-left and bottom-right corners \
         in that image.\n\
         Reply with JSON only, no other text."
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_prompt_embeds_instruction_once() {
        let p = render_word_prompt("make the cat sit on the sofa", 2).unwrap();
        assert_eq!(p.matches("make the cat sit on the sofa").count(), 1);
        assert!(p.contains("2 reference image(s)"));
    }

    #[test]
    fn word_prompt_escapes_quotes() {
        let p = render_word_prompt("say \"hello\" loudly", 1).unwrap();
        assert!(p.contains("say \\\"hello\\\" loudly"));
    }

    #[test]
    fn prompts_are_deterministic() {
        let a = render_word_prompt("x y z", 3).unwrap();
        let b = render_word_prompt("x y z", 3).unwrap();
        assert_eq!(a, b);
        let a = render_bbox_prompt("cat", 3).unwrap();
        let b = render_bbox_prompt("cat", 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bbox_prompt_names_word_exactly_once() {
        let p = render_bbox_prompt("cat", 2).unwrap();
        assert_eq!(p.matches("\"cat\"").count(), 1);
    }

    #[test]
    fn empty_word_is_an_input_error() {
        assert!(matches!(render_bbox_prompt("", 1), Err(GroundingError::EmptyInput("word"))));
        assert!(matches!(
            render_word_prompt("", 1),
            Err(GroundingError::EmptyInput("instruction"))
        ));
    }
}
