//! Versioned prompt templates.
//!
//! Templates live under `templates/<version>/` and are compiled in. Cassette
//! fingerprints hash the rendered text, so any wording change must bump
//! [`TEMPLATE_VERSION`] and re-record.

pub const TEMPLATE_VERSION: &str = "v1";

/// Fixed second-stage instruction of the two-stage strategies.
pub const STAGE2_INSTRUCTION: &str = "Check your prediction cautiously.";
pub const INSTRUCTION_PREFIX: &str = "Instruction: ";
/// Appended when a verdict could not be parsed.
pub const STRICT_VERDICT_REASK: &str = "Answer strictly YES or NO.";
/// Summary used when a polarity side has no triples.
pub const EMPTY_KNOWLEDGE_SENTINEL: &str = "No curated knowledge available for this criterion.";

pub const EHR_PREFIX: &str = "EHR Data: ";
pub const POSITIVE_GUIDANCE_PREFIX: &str = "Guidance from KG: Factors supporting a diagnosis of ";
pub const NEGATIVE_GUIDANCE_PREFIX: &str = "Guidance from KG: Factors that rule out or are unrelated to ";

macro_rules! template {
    ($name:literal) => {
        include_str!(concat!("../templates/v1/", $name, ".txt")).trim_end()
    };
}

pub mod text {
    pub fn linkage_system() -> &'static str {
        template!("linkage_system")
    }
    pub fn linkage_user() -> &'static str {
        template!("linkage_user")
    }
    pub fn linkage_retry() -> &'static str {
        template!("linkage_retry")
    }
    pub fn retrieval_system() -> &'static str {
        template!("retrieval_system")
    }
    pub fn retrieval_positive() -> &'static str {
        template!("retrieval_positive")
    }
    pub fn retrieval_negative() -> &'static str {
        template!("retrieval_negative")
    }
    pub fn prediction_system() -> &'static str {
        template!("prediction_system")
    }
    pub fn ehr_question() -> &'static str {
        template!("ehr_question")
    }
    pub fn guidance_positive() -> &'static str {
        template!("guidance_positive")
    }
    pub fn guidance_negative() -> &'static str {
        template!("guidance_negative")
    }
    pub fn step_by_step() -> &'static str {
        template!("step_by_step")
    }
    pub fn reflection_stage1() -> &'static str {
        template!("reflection_stage1")
    }
    pub fn reflection_stage2() -> &'static str {
        template!("reflection_stage2")
    }
    pub fn answer_format() -> &'static str {
        template!("answer_format")
    }

    #[cfg(test)]
    pub(crate) fn all() -> [(&'static str, &'static str); 14] {
        [
            ("linkage_system", linkage_system()),
            ("linkage_user", linkage_user()),
            ("linkage_retry", linkage_retry()),
            ("retrieval_system", retrieval_system()),
            ("retrieval_positive", retrieval_positive()),
            ("retrieval_negative", retrieval_negative()),
            ("prediction_system", prediction_system()),
            ("ehr_question", ehr_question()),
            ("guidance_positive", guidance_positive()),
            ("guidance_negative", guidance_negative()),
            ("step_by_step", step_by_step()),
            ("reflection_stage1", reflection_stage1()),
            ("reflection_stage2", reflection_stage2()),
            ("answer_format", answer_format()),
        ]
    }
}

/// Replaces `{{name}}` placeholders in one pass; substituted values are not
/// rescanned.
///
/// Panics on a placeholder with no value, since templates are compiled in.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find("}}").expect("unterminated template placeholder");
        let name = &after[..end];
        let value = vars
            .iter()
            .find(|(k, _)| *k == name)
            .unwrap_or_else(|| panic!("no value for template placeholder `{name}`"))
            .1;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    out
}

/// `; `-joined attributes in their recorded order.
pub fn render_attributes(attributes: &[String]) -> String {
    attributes.join("; ")
}
