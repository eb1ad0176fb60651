//! Translation providers. Real machine translation is out of reach here, so
//! the built-in providers are deterministic synthetic "languages": identity
//! and seeded letter-substitution ciphers (optionally reversing word order).
//! Anything else plugs in through [`CommandProvider`].

use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::QAInstance;
use crate::error::{Error, Result};

pub trait TranslationProvider: Send + Sync {
    /// Translates each text into `target`, preserving order.
    fn translate(&self, texts: &[String], target: &str) -> std::result::Result<Vec<String>, String>;

    fn describe(&self) -> String;
}

/// Returns its input.
#[derive(Clone, Debug, Default)]
pub struct IdentityProvider;

impl TranslationProvider for IdentityProvider {
    fn translate(&self, texts: &[String], _: &str) -> std::result::Result<Vec<String>, String> {
        Ok(texts.to_vec())
    }

    fn describe(&self) -> String {
        "identity".into()
    }
}

/// Seeded bijective substitution of lowercase letters and of digits, applied
/// character-wise (case preserved), with optional word-order reversal.
/// Every other character passes through.
#[derive(Clone, Debug)]
pub struct CipherProvider {
    seed: u64,
    reverse: bool,
    letters: [u8; 26],
    digits: [u8; 10],
    inverse: bool,
}

impl CipherProvider {
    pub fn new(seed: u64, reverse: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut letters: Vec<u8> = (b'a'..=b'z').collect();
        letters.shuffle(&mut rng);
        let mut digits: Vec<u8> = (b'0'..=b'9').collect();
        digits.shuffle(&mut rng);
        CipherProvider {
            seed,
            reverse,
            letters: letters.try_into().expect("26 letters"),
            digits: digits.try_into().expect("10 digits"),
            inverse: false,
        }
    }

    /// The decoding direction of the same cipher.
    pub fn inverse(&self) -> Self {
        let mut letters = [0u8; 26];
        for (i, &c) in self.letters.iter().enumerate() {
            letters[(c - b'a') as usize] = b'a' + i as u8;
        }
        let mut digits = [0u8; 10];
        for (i, &c) in self.digits.iter().enumerate() {
            digits[(c - b'0') as usize] = b'0' + i as u8;
        }
        CipherProvider {
            seed: self.seed,
            reverse: self.reverse,
            letters,
            digits,
            inverse: !self.inverse,
        }
    }

    fn map_char(&self, c: char) -> char {
        match c {
            'a'..='z' => self.letters[(c as u8 - b'a') as usize] as char,
            'A'..='Z' => (self.letters[(c as u8 - b'A') as usize] as char).to_ascii_uppercase(),
            '0'..='9' => self.digits[(c as u8 - b'0') as usize] as char,
            other => other,
        }
    }

    pub fn apply(&self, text: &str) -> String {
        let mapped: String = text.chars().map(|c| self.map_char(c)).collect();
        if self.reverse {
            mapped.split_whitespace().rev().collect::<Vec<_>>().join(" ")
        } else {
            mapped
        }
    }
}

impl TranslationProvider for CipherProvider {
    fn translate(&self, texts: &[String], _: &str) -> std::result::Result<Vec<String>, String> {
        Ok(texts.iter().map(|t| self.apply(t)).collect())
    }

    fn describe(&self) -> String {
        let dir = if self.inverse { "decipher" } else { "cipher" };
        let rev = if self.reverse { ":reverse" } else { "" };
        format!("{dir}:{}{rev}", self.seed)
    }
}

/// Providers applied left to right.
pub struct ChainProvider(pub Vec<Box<dyn TranslationProvider>>);

impl TranslationProvider for ChainProvider {
    fn translate(&self, texts: &[String], target: &str) -> std::result::Result<Vec<String>, String> {
        let mut cur = texts.to_vec();
        for p in &self.0 {
            cur = p.translate(&cur, target)?;
        }
        Ok(cur)
    }

    fn describe(&self) -> String {
        self.0.iter().map(|p| p.describe()).collect::<Vec<_>>().join("+")
    }
}

#[derive(Serialize)]
struct CommandRequest<'a> {
    text: &'a str,
    target_language: &'a str,
}

#[derive(Deserialize)]
struct CommandReply {
    text: String,
}

/// External translator: `sh -c <command>` reads one JSON object
/// `{text, target_language}` per line on stdin and answers with one
/// `{text}` per line on stdout, in order.
#[derive(Clone, Debug)]
pub struct CommandProvider {
    pub command: String,
}

impl TranslationProvider for CommandProvider {
    fn translate(&self, texts: &[String], target: &str) -> std::result::Result<Vec<String>, String> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| format!("spawning `{}`: {e}", self.command))?;
        let mut payload = String::new();
        for t in texts {
            let line = serde_json::to_string(&CommandRequest {
                text: t,
                target_language: target,
            })
            .map_err(|e| e.to_string())?;
            payload.push_str(&line);
            payload.push('\n');
        }
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = std::thread::spawn(move || stdin.write_all(payload.as_bytes()));
        let stdout = child.stdout.take().expect("piped stdout");
        let mut out = Vec::with_capacity(texts.len());
        for line in BufReader::new(stdout).lines() {
            let line = line.map_err(|e| e.to_string())?;
            if line.trim().is_empty() {
                continue;
            }
            let reply: CommandReply =
                serde_json::from_str(&line).map_err(|e| format!("bad reply `{line}`: {e}"))?;
            out.push(reply.text);
        }
        writer
            .join()
            .map_err(|_| "stdin writer panicked".to_string())?
            .map_err(|e| format!("writing to translator: {e}"))?;
        let status = child.wait().map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("`{}` exited with {status}", self.command));
        }
        if out.len() != texts.len() {
            return Err(format!(
                "translator returned {} lines for {} inputs",
                out.len(),
                texts.len()
            ));
        }
        Ok(out)
    }

    fn describe(&self) -> String {
        format!("command:{}", self.command)
    }
}

/// Parses `identity`, `cipher:SEED[:reverse]`, `decipher:SEED[:reverse]`,
/// `command:<shell command>`, or a `+`-joined chain of the non-command forms
/// optionally ending in a command.
pub fn parse_provider(spec: &str) -> Result<Box<dyn TranslationProvider>> {
    let bad = |msg: String| Error::Config(format!("provider `{spec}`: {msg}"));
    let mut parts: Vec<Box<dyn TranslationProvider>> = Vec::new();
    let mut rest = spec.trim();
    while !rest.is_empty() {
        if let Some(cmd) = rest.strip_prefix("command:") {
            parts.push(Box::new(CommandProvider {
                command: cmd.to_string(),
            }));
            break;
        }
        let (head, tail) = match rest.split_once('+') {
            Some((h, t)) => (h, t),
            None => (rest, ""),
        };
        rest = tail.trim();
        let fields: Vec<&str> = head.trim().split(':').collect();
        let part: Box<dyn TranslationProvider> = match fields.as_slice() {
            ["identity"] => Box::new(IdentityProvider),
            [kind @ ("cipher" | "decipher"), seed, flags @ ..] => {
                let seed: u64 = seed.parse().map_err(|e| bad(format!("seed: {e}")))?;
                let reverse = match flags {
                    [] => false,
                    ["reverse"] => true,
                    other => return Err(bad(format!("unknown flags {other:?}"))),
                };
                let c = CipherProvider::new(seed, reverse);
                if *kind == "cipher" {
                    Box::new(c)
                } else {
                    Box::new(c.inverse())
                }
            }
            _ => return Err(bad(format!("unknown form `{head}`"))),
        };
        parts.push(part);
    }
    match parts.len() {
        0 => Err(bad("empty".into())),
        1 => Ok(parts.pop().expect("one part")),
        _ => Ok(Box::new(ChainProvider(parts))),
    }
}

/// Outcome of translating a single instance.
#[derive(Clone, Debug, PartialEq)]
pub enum Translated {
    Kept(QAInstance),
    /// The translated answer does not occur in the translated context.
    AnswerMissing,
}

/// Translates question, context and answer, then relocates the answer at its
/// first occurrence in the translated context.
pub fn translate_instance(
    inst: &QAInstance,
    provider: &dyn TranslationProvider,
    target_language: &str,
) -> Result<Translated> {
    let texts = [
        inst.question.clone(),
        inst.context.clone(),
        inst.answer_text.clone(),
    ];
    let out = provider
        .translate(&texts, target_language)
        .map_err(|message| Error::Provider {
            id: inst.id.clone(),
            message,
        })?;
    let [question, context, answer_text]: [String; 3] =
        out.try_into().map_err(|v: Vec<String>| Error::Provider {
            id: inst.id.clone(),
            message: format!("expected 3 texts, got {}", v.len()),
        })?;
    let Some(byte_pos) = (!answer_text.is_empty())
        .then(|| context.find(&answer_text))
        .flatten()
    else {
        log::warn!("instance {}: translated answer not in translated context", inst.id);
        return Ok(Translated::AnswerMissing);
    };
    let answer_char_start = context[..byte_pos].chars().count();
    Ok(Translated::Kept(QAInstance {
        id: inst.id.clone(),
        question,
        context,
        answer_text,
        answer_char_start,
        language: target_language.to_string(),
        source_dataset: inst.source_dataset.clone(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst() -> QAInstance {
        QAInstance {
            id: "i1".into(),
            question: "Who sat on the mat?".into(),
            context: "The cat sat on the mat, then 2 dogs came.".into(),
            answer_text: "cat".into(),
            answer_char_start: 4,
            language: "en".into(),
            source_dataset: "toy".into(),
        }
    }

    #[test]
    fn identity_keeps_everything_but_language() {
        let Translated::Kept(out) = translate_instance(&inst(), &IdentityProvider, "xx").unwrap()
        else {
            panic!("dropped");
        };
        assert_eq!(out, QAInstance { language: "xx".into(), ..inst() });
    }

    #[test]
    fn cipher_round_trips_through_inverse() {
        for reverse in [false, true] {
            let c = CipherProvider::new(42, reverse);
            let Translated::Kept(t) = translate_instance(&inst(), &c, "c42").unwrap() else {
                panic!("dropped");
            };
            assert!(t.answer_matches());
            assert_ne!(t.context, inst().context);
            let back = c.inverse();
            if reverse {
                let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
                assert_eq!(back.apply(&t.context), norm(&inst().context));
            } else {
                assert_eq!(back.apply(&t.context), inst().context);
                assert_eq!(back.apply(&t.question), inst().question);
            }
        }
    }

    struct Lossy;
    impl TranslationProvider for Lossy {
        fn translate(&self, texts: &[String], _: &str) -> std::result::Result<Vec<String>, String> {
            Ok(vec![texts[0].clone(), "nothing here".into(), texts[2].clone()])
        }
        fn describe(&self) -> String {
            "lossy".into()
        }
    }

    #[test]
    fn missing_answer_is_dropped() {
        assert_eq!(
            translate_instance(&inst(), &Lossy, "xx").unwrap(),
            Translated::AnswerMissing
        );
    }

    #[test]
    fn provider_specs() {
        let p = parse_provider("decipher:7+cipher:9:reverse").unwrap();
        assert_eq!(p.describe(), "decipher:7+cipher:9:reverse");
        let t = CipherProvider::new(7, false).apply("hello world");
        let out = p.translate(&[t], "x").unwrap();
        assert_eq!(out[0], CipherProvider::new(9, true).apply("hello world"));
        assert!(parse_provider("rot13").is_err());
        assert!(parse_provider("cipher:x").is_err());
    }

    #[test]
    fn command_provider_contract() {
        let p = parse_provider("command:cat").unwrap();
        // `cat` echoes the request objects, whose `text` field is the input.
        let out = p.translate(&["a \"b\"".into(), "c".into()], "xx").unwrap();
        assert_eq!(out, vec!["a \"b\"".to_string(), "c".to_string()]);
        let failing = parse_provider("command:exit 3").unwrap();
        assert!(failing.translate(&["a".into()], "xx").is_err());
    }
}
