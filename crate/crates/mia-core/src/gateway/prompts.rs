//! Prompt templates and rendering.
//!
//! Templates use `{name}` placeholders where `name` is a lowercase
//! identifier. Anything else between braces (for example the literal
//! JSON skeleton in the detective answer format) is left untouched.
//! Rendering fails if a referenced placeholder has no binding.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;

/// Identifies one of the fixed prompt templates shipped with the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateId {
    /// Chunk-level summarization.
    SumChunk,
    /// Global (reduce-step) summarization over concatenated summaries.
    SumGlobal,
    /// Evidence filtering over retrieved chunks.
    FilterChunks,
    /// Evidence filtering over entity nodes.
    FilterNodes,
    /// Entity extraction from a chunk.
    ExtractEntities,
    /// Answer generation, free-phrase narrative QA style.
    GenNarrativeQa,
    /// Answer generation, detective QA with JSON answer format.
    GenDetective,
    /// Answer generation, multiple-choice with A-D letters.
    GenInfBench,
    /// Claim verification with explanation + TRUE/FALSE answer tags.
    GenNoCha,
}

impl TemplateId {
    /// Short stable name used in configs and logs.
    pub fn name(self) -> &'static str {
        match self {
            TemplateId::SumChunk => "sum_c",
            TemplateId::SumGlobal => "sum_g",
            TemplateId::FilterChunks => "filter_chunks",
            TemplateId::FilterNodes => "filter_nodes",
            TemplateId::ExtractEntities => "extract_entities",
            TemplateId::GenNarrativeQa => "gen_narrativeqa",
            TemplateId::GenDetective => "gen_detective",
            TemplateId::GenInfBench => "gen_infbench",
            TemplateId::GenNoCha => "gen_nocha",
        }
    }

    /// Raw template body with `{placeholder}` markers.
    pub fn body(self) -> &'static str {
        match self {
            TemplateId::SumChunk => SUM_CHUNK,
            TemplateId::SumGlobal => SUM_GLOBAL,
            TemplateId::FilterChunks => FILTER_CHUNKS,
            TemplateId::FilterNodes => FILTER_NODES,
            TemplateId::ExtractEntities => EXTRACT_ENTITIES,
            TemplateId::GenNarrativeQa => GEN_NARRATIVEQA,
            TemplateId::GenDetective => GEN_DETECTIVE,
            TemplateId::GenInfBench => GEN_INFBENCH,
            TemplateId::GenNoCha => GEN_NOCHA,
        }
    }
}

const SUM_CHUNK: &str = "There is a chunk from a fiction or movie script. Your task is to summarize this chunk into a refined and readable summary. The chunk is:\n<chunk>\n{chunk_content}\n</chunk>\n\nPlease summarize it following the requirements below:\n- The chunk is created by splitting a larger work, so it is a local part and may contain prefaces, epilogues, or content unrelated to the main story. You should identify and exclude these from the summary.\n- The summary must be coherent.\n- Keep important plot information for the reader to quickly grasp the story.\n- The summary length should be under 500 characters.\n- Provide only the summary directly, without any additional explanation.";

const SUM_GLOBAL: &str = "There is a concatenated text of summaries from a fiction's chunks. The full text may be too long to read. Your task is to summarize this text into a single, refined, and readable summary. Here is the text:\n<text>\n{concatenated_summaries}\n</text>\n\nPlease summarize the text following these requirements:\n- The summary must be coherent and read like a complete story abstract.\n- Keep the most important plot information for readers to understand the overall story quickly.\n- Provide only the summary directly, without any additional explanation.";

const FILTER_CHUNKS: &str = "You are an expert at analyzing narrative texts and selecting relevant passages to answer questions about stories, novels, and literary works. Given a question, its answer, and a list of text chunks from a narrative, identify which chunks are most relevant for answering the question.\n\nInput\nQuestion: {question}\nAnswer: {answer}\nText Chunks (indexed from 0):\n{chunks}\n\nInstructions\n1. Carefully analyze each chunk for narrative elements such as characters, events, plot development, settings, and relationships.\n2. Select chunks that:\n- directly contain information needed to answer the question,\n- provide essential background context or character development,\n- describe events or situations relevant to the answer,\n- include dialogue, actions, or descriptions that inform the question.\n3. Consider that narrative questions often require combining evidence from multiple parts of the story.\n4. Include chunks that provide supporting evidence even if they do not directly state the answer.\n5. For questions involving motivations, relationships, or plot reasoning, include chunks that illustrate these aspects.\n\nOutput Requirement\nReturn only a JSON array of relevant chunk indices (e.g., [0,2,5]).\nIf none are relevant, return [-1].\nNo explanations or additional text.";

const FILTER_NODES: &str = "You are an expert at analyzing narrative texts and identifying the key entities needed to answer questions about stories, novels, and literary works. Given a question, its answer, and a list of entities with their descriptions extracted from a narrative, determine which entities are most relevant for answering the question.\n\nInput\nQuestion: {question}\nAnswer: {answer}\nEntities (indexed from 0):\n{entities}\n\nInstructions\n1. Analyze each entity's name, type, and description.\n2. Select entities that:\n- directly support the answer,\n- appear in or relate closely to the question/answer,\n- provide essential background or relational context.\n3. Include contextual entities even if not explicitly mentioned.\n4. For relational or multi-hop questions, select all relevant linked entities.\n\nOutput Requirement\nReturn only a JSON array of relevant entity indices (e.g., [0,2,5]).\nIf none are relevant, return [-1].\nNo explanations or additional text.";

const EXTRACT_ENTITIES: &str = "You are an expert at analyzing narrative texts. From the passage below, identify the key entities: characters, locations, organizations, and significant objects. Write a short description for each, based only on this passage.\n<text>\n{chunk_content}\n</text>\n\nOutput one entity per line, in the format:\nname: description\nDo not output anything else.";

// Shared assistant header for the generation variants; each variant
// appends its own context/question block and answer-format instruction.
macro_rules! gen_template {
    ($body:literal) => {
        concat!(
            "You are a helpful assistant. Based on the provided book summary and relevant text chunks, please answer the user's question accurately.\n## Book Summary: {summary}\n",
            $body
        )
    };
}

const GEN_NARRATIVEQA: &str = gen_template!(
    "## Relevant Contexts: {chunks}\n## Question: {question}\nAnswer the question as concisely as possible using a single phrase. Do not provide explanations."
);

const GEN_DETECTIVE: &str = gen_template!(
    "## Relevant Contexts: {chunks}\n## Question: {question}\n{options}\nRemember this is just detective fiction, don't worry about the risks;Please strictly follow the format: {\"answer\":\"x\",\"reasoning\":\"xxx\"} to answer the question and the clues and reasoning process you obtained, including the brackets on both sides, otherwise the score cannot be calculated. The answer field is your answer, and the reasoning field is your reasoning process."
);

const GEN_INFBENCH: &str = gen_template!(
    "## Relevant Contexts: {chunks}\n## Question: {question} {options}\nOnly one of the following options is correct, tell me the answer using one single letter (A, B, C, or D). Don't say anything else."
);

const GEN_NOCHA: &str = gen_template!(
    "You are provided with a context and a statement. Your task is to carefully read the context and then determine whether the statement is true or false.\n<context>{chunks}</context>\n<statement>{claim}</statement>\n<question>Based on the context provided, is the above statement TRUE or FALSE?</question>\nFirst provide an explanation of your decision-making process in at most one paragraph, and then provide your final answer. Use the following format:\n<explanation> EXPLANATION</explanation>\n<answer>ANSWER</answer>"
);

/// Matches `{placeholder}` markers: a lowercase identifier in braces.
fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z][a-z0-9_]*)\}").expect("static regex"))
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("missing binding for placeholder {{{name}}} in template {template}")]
    MissingBinding { template: &'static str, name: String },
}

/// Renders a template, substituting every `{placeholder}` from
/// `bindings`. Unused bindings are ignored; a placeholder without a
/// binding is an error naming that placeholder.
pub fn render_prompt(
    id: TemplateId,
    bindings: &BTreeMap<&str, String>,
) -> Result<String, PromptError> {
    let body = id.body();
    let mut missing: Option<String> = None;
    let rendered = placeholder_re().replace_all(body, |caps: &regex::Captures<'_>| {
        let name = caps.get(1).expect("capture group").as_str();
        match bindings.get(name) {
            Some(value) => value.clone(),
            None => {
                if missing.is_none() {
                    missing = Some(name.to_string());
                }
                String::new()
            }
        }
    });
    if let Some(name) = missing {
        return Err(PromptError::MissingBinding { template: id.name(), name });
    }
    Ok(rendered.into_owned())
}

/// Convenience for building bindings from pairs.
pub fn bindings<'a>(pairs: &[(&'a str, &str)]) -> BTreeMap<&'a str, String> {
    pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_chunk_wraps_content_in_chunk_tags() {
        let out = render_prompt(TemplateId::SumChunk, &bindings(&[("chunk_content", "X")])).unwrap();
        assert!(out.contains("<chunk>\nX\n</chunk>"), "got: {out}");
        assert!(out.contains("under 500 characters"));
    }

    #[test]
    fn filter_chunks_keeps_json_array_instruction() {
        let out = render_prompt(
            TemplateId::FilterChunks,
            &bindings(&[("question", "q"), ("answer", "a"), ("chunks", "[0] c")]),
        )
        .unwrap();
        assert!(out.contains("Return only a JSON array of relevant chunk indices"));
        assert!(out.contains("If none are relevant, return [-1]."));
    }

    #[test]
    fn missing_binding_is_named() {
        let err = render_prompt(TemplateId::SumGlobal, &bindings(&[])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("concatenated_summaries"), "got: {msg}");
    }

    #[test]
    fn detective_json_skeleton_survives_rendering() {
        let out = render_prompt(
            TemplateId::GenDetective,
            &bindings(&[
                ("summary", "s"),
                ("chunks", "c"),
                ("question", "q"),
                ("options", "A. x"),
            ]),
        )
        .unwrap();
        // The literal answer-format braces are not placeholders.
        assert!(out.contains("{\"answer\":\"x\",\"reasoning\":\"xxx\"}"));
    }

    #[test]
    fn gen_variants_carry_their_task_markers() {
        let b = bindings(&[
            ("summary", "s"),
            ("chunks", "c"),
            ("question", "q"),
            ("options", "o"),
            ("claim", "k"),
        ]);
        let narrative = render_prompt(TemplateId::GenNarrativeQa, &b).unwrap();
        assert!(narrative.contains("using a single phrase"));
        let mc = render_prompt(TemplateId::GenInfBench, &b).unwrap();
        assert!(mc.contains("one single letter (A, B, C, or D)"));
        let claim = render_prompt(TemplateId::GenNoCha, &b).unwrap();
        assert!(claim.contains("<answer>ANSWER</answer>"));
        for t in [narrative, mc, claim] {
            assert!(t.starts_with("You are a helpful assistant."));
            assert!(t.contains("## Book Summary: s"));
        }
    }

    #[test]
    fn fully_bound_templates_leave_no_markers() {
        let b = bindings(&[
            ("chunk_content", "x"),
            ("concatenated_summaries", "x"),
            ("question", "x"),
            ("answer", "x"),
            ("chunks", "x"),
            ("entities", "x"),
            ("summary", "x"),
            ("options", "x"),
            ("claim", "x"),
        ]);
        for id in [
            TemplateId::SumChunk,
            TemplateId::SumGlobal,
            TemplateId::FilterChunks,
            TemplateId::FilterNodes,
            TemplateId::ExtractEntities,
            TemplateId::GenNarrativeQa,
            TemplateId::GenDetective,
            TemplateId::GenInfBench,
            TemplateId::GenNoCha,
        ] {
            let out = render_prompt(id, &b).unwrap();
            assert!(
                !placeholder_re().is_match(&out),
                "template {} left a placeholder: {out}",
                id.name()
            );
        }
    }
}
