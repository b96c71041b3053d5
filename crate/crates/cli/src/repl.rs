//! Line-oriented chat loop. Replies go to the output; prompts and
//! diagnostics go to stderr so scripted transcripts stay comparable.

use std::io::{self, BufRead, Write};

use coral_core::tokenizer::{SpecialRendering, END_OF_TEXT};
use coral_core::{chat_respond, ChatSession, DecodeConfig};
use coral_service::LoadedModel;

pub struct ReplOptions {
    pub window: usize,
    pub decode: DecodeConfig,
    pub debug_context: bool,
    /// Show a `you>` prompt before every line.
    pub prompt: bool,
}

pub fn run<R: BufRead, W: Write>(input: R, mut out: W, model: &LoadedModel, options: &ReplOptions) -> io::Result<()> {
    let mut session = ChatSession::new("terminal", options.window);
    let show_eot = SpecialRendering::EndOfText(END_OF_TEXT.to_string());
    if options.prompt {
        eprintln!("/reset starts over, /quit exits");
    }
    let mut lines = input.lines();
    loop {
        if options.prompt {
            eprint!("you> ");
        }
        let Some(line) = lines.next() else { break };
        let line = line?;
        let text = line.trim();
        match text {
            "" => continue,
            "/quit" => break,
            "/reset" => {
                session.reset();
                writeln!(out, "[session reset]")?;
                continue;
            }
            _ => {}
        }
        match chat_respond(&mut session, text, &*model.weights, &model.vocab, &options.decode) {
            Ok(reply) => {
                if options.debug_context {
                    let context = model
                        .vocab
                        .decode_with(&reply.context_ids, &show_eot)
                        .map_err(io::Error::other)?;
                    writeln!(out, "[context] {context}")?;
                }
                writeln!(out, "bot> {}", reply.text)?;
            }
            Err(e) => eprintln!("error: {e}"),
        }
        out.flush()?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use coral_core::{DecoderWeights, ModelConfig, Vocabulary};

    fn model() -> LoadedModel {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: 258,
            max_seq_len: 96,
            dropout_rate: 0.0,
        };
        LoadedModel::new(DecoderWeights::init(cfg, 5).unwrap(), Vocabulary::bytes_only())
    }

    fn transcript(script: &str, debug_context: bool) -> String {
        let options = ReplOptions {
            window: 2,
            decode: DecodeConfig::greedy(6),
            debug_context,
            prompt: false,
        };
        let mut out = Vec::new();
        run(script.as_bytes(), &mut out, &model(), &options).unwrap();
        String::from_utf8(out).unwrap()
    }

    #[test]
    fn quit_first_generates_nothing() {
        assert_eq!(transcript("/quit\nhello\n", false), "");
        assert_eq!(transcript("", false), "");
    }

    #[test]
    fn reset_clears_the_context() {
        let out = transcript("first\nsecond\n/reset\nthird\n", true);
        let contexts: Vec<&str> = out.lines().filter(|l| l.starts_with("[context]")).collect();
        assert_eq!(contexts.len(), 3);
        assert_eq!(contexts[0], "[context] first<|endoftext|>");
        assert!(contexts[1].ends_with("second<|endoftext|>"));
        assert_eq!(contexts[2], "[context] third<|endoftext|>");
    }

    #[test]
    fn greedy_transcript_replays_exactly() {
        let script = "I feel sad\nmy dog is sick\nthanks\n";
        let a = transcript(script, false);
        assert_eq!(a.lines().count(), 3);
        assert_eq!(a, transcript(script, false));
    }
}
