//! Prompt templates: the bare motion-to-text frame used for pretraining and
//! the bank of instruction phrasings used for instruction tuning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MOTION_PLACEHOLDER: &str = "<Motion_Placeholder>";
pub const CAPTION_PLACEHOLDER: &str = "<Caption_Placeholder>";
/// Literal that the text vocabulary maps to the reserved motion id.
pub const MOTION_TOKEN: &str = "<MOTION>";

const BUILTIN: &str = include_str!("../data/templates.json");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainFrame {
    pub class: String,
    pub input: String,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instruction {
    pub id: usize,
    pub text: String,
    pub holdout: bool,
    /// `"listed"` for the four canonical phrasings, `"authored"` otherwise.
    pub origin: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateBank {
    pub pretrain: PretrainFrame,
    pub instructions: Vec<Instruction>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemplateRef {
    Pretrain,
    Instruction(usize),
}

fn count(hay: &str, needle: &str) -> usize {
    hay.matches(needle).count()
}

impl TemplateBank {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN).expect("bundled templates are valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bank: TemplateBank =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("templates: {e}")))?;
        bank.validate()?;
        Ok(bank)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    fn validate(&self) -> Result<()> {
        if count(&self.pretrain.input, MOTION_PLACEHOLDER) != 1
            || self.pretrain.input.contains(CAPTION_PLACEHOLDER)
        {
            return Err(Error::Config(
                "pretrain frame needs exactly one motion placeholder".into(),
            ));
        }
        if self.instructions.is_empty() {
            return Err(Error::Config("template bank has no instructions".into()));
        }
        for (i, t) in self.instructions.iter().enumerate() {
            if t.id != i {
                return Err(Error::Config(format!(
                    "template ids must be dense, found {} at {i}",
                    t.id
                )));
            }
            if count(&t.text, MOTION_PLACEHOLDER) != 1 || t.text.contains(CAPTION_PLACEHOLDER) {
                return Err(Error::Config(format!(
                    "template {i} needs exactly one motion placeholder"
                )));
            }
        }
        if self.trainable().is_empty() {
            return Err(Error::Config("every template is held out".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn holdout(&self) -> Vec<usize> {
        self.instructions
            .iter()
            .filter(|t| t.holdout)
            .map(|t| t.id)
            .collect()
    }

    pub fn trainable(&self) -> Vec<usize> {
        self.instructions
            .iter()
            .filter(|t| !t.holdout)
            .map(|t| t.id)
            .collect()
    }

    /// Uniform draw over the non-held-out instructions.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let ids = self.trainable();
        ids[rng.random_range(0..ids.len())]
    }

    /// Returns `(prompt, target)`: the prompt with the motion placeholder
    /// replaced by [`MOTION_TOKEN`], and the caption unchanged.
    pub fn render(&self, which: TemplateRef, caption: &str) -> Result<(String, String)> {
        let lower = caption.to_lowercase();
        for reserved in [MOTION_PLACEHOLDER, CAPTION_PLACEHOLDER, MOTION_TOKEN] {
            if lower.contains(&reserved.to_lowercase()) {
                return Err(Error::invalid(format!(
                    "caption contains reserved string {reserved}"
                )));
            }
        }
        let text = match which {
            TemplateRef::Pretrain => &self.pretrain.input,
            TemplateRef::Instruction(id) => {
                &self
                    .instructions
                    .get(id)
                    .ok_or_else(|| Error::invalid(format!("unknown template id {id}")))?
                    .text
            }
        };
        Ok((
            text.replace(MOTION_PLACEHOLDER, MOTION_TOKEN),
            caption.to_string(),
        ))
    }
}

/// Prompt text for a user instruction. Text without the placeholder gets the
/// motion appended after it; the second value reports whether that happened.
pub fn user_prompt(instruction: &str) -> (String, bool) {
    match count(instruction, MOTION_PLACEHOLDER) {
        0 => (format!("{instruction} {MOTION_TOKEN}"), true),
        _ => (
            instruction
                .replacen(MOTION_PLACEHOLDER, MOTION_TOKEN, 1)
                .replace(MOTION_PLACEHOLDER, ""),
            false,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn builtin_bank_shape() {
        let bank = TemplateBank::builtin();
        assert!(bank.len() >= 24);
        assert_eq!(bank.holdout().len(), 2);
        let listed = bank
            .instructions
            .iter()
            .filter(|t| t.origin == "listed")
            .count();
        assert_eq!(listed, 4);
    }

    #[test]
    fn pretrain_frame_renders_bare_motion() {
        let bank = TemplateBank::builtin();
        let (p, t) = bank.render(TemplateRef::Pretrain, "good morning").unwrap();
        assert_eq!(p, "<MOTION>");
        assert_eq!(t, "good morning");
    }

    #[test]
    fn template_zero_text() {
        let bank = TemplateBank::builtin();
        let (p, _) = bank.render(TemplateRef::Instruction(0), "x").unwrap();
        assert_eq!(
            p,
            "Translate the American Sign Language represented by <MOTION> to English."
        );
    }

    #[test]
    fn reserved_caption_and_unknown_id_fail() {
        let bank = TemplateBank::builtin();
        assert!(bank
            .render(TemplateRef::Pretrain, "a <Motion_Placeholder> b")
            .is_err());
        assert!(bank.render(TemplateRef::Pretrain, "a <motion> b").is_err());
        assert!(bank.render(TemplateRef::Instruction(999), "a").is_err());
    }

    #[test]
    fn sampling_is_seeded_and_avoids_holdout() {
        let bank = TemplateBank::builtin();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10 * bank.len())
                .map(|_| bank.sample(&mut rng))
                .collect::<Vec<_>>()
        };
        let a = draw(5);
        assert_eq!(a, draw(5));
        let hold = bank.holdout();
        assert!(a.iter().all(|id| !hold.contains(id)));
        for id in bank.trainable() {
            assert!(a.contains(&id), "template {id} never drawn");
        }
    }

    #[test]
    fn json_round_trip() {
        let bank = TemplateBank::builtin();
        let text = bank.to_json();
        let again = TemplateBank::from_json(&text).unwrap();
        assert_eq!(again, bank);
        assert_eq!(again.to_json(), text);
    }

    #[test]
    fn invalid_banks_are_rejected() {
        let mut bank = TemplateBank::builtin();
        bank.instructions[3].text = "no placeholder here".into();
        assert!(TemplateBank::from_json(&bank.to_json()).is_err());
    }

    #[test]
    fn user_prompt_wraps_when_needed() {
        assert_eq!(
            user_prompt("translate please"),
            ("translate please <MOTION>".to_string(), true)
        );
        assert_eq!(
            user_prompt("say <Motion_Placeholder> now").0,
            "say <MOTION> now"
        );
    }

    #[test]
    fn rendering_is_injective_in_caption() {
        let bank = TemplateBank::builtin();
        let a = bank
            .render(TemplateRef::Instruction(2), "hello world")
            .unwrap();
        let b = bank
            .render(TemplateRef::Instruction(2), "hello there")
            .unwrap();
        assert_ne!(a.1, b.1);
    }
}
