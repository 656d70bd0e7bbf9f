//! Base speakers: next-token distributions given an image and a prefix.

mod remote;
mod template;

pub use remote::{remote_speaker, serve_connection, RemoteSpeaker, DEFAULT_TIMEOUT};
pub use template::{avg_feature_speaker, template_speaker, TemplateSpeaker, TemplateSpeakerParams};

use crate::error::{Error, Result};
use crate::prob::{Dist, Support};

/// A literal speaker: a conditional distribution over the next token.
///
/// Implementations must return a [`Dist`] whose support is exactly
/// [`SpeakerBackend::vocabulary`], in the same order on every call, and must
/// be deterministic in `(image, prefix)`.
pub trait SpeakerBackend: Send + Sync {
    fn vocabulary(&self) -> &Support;

    fn eos(&self) -> &str;

    fn next_token_logprobs(&self, image: &str, prefix: &[String]) -> Result<Dist>;

    fn eos_index(&self) -> usize {
        let eos = self.eos();
        self.vocabulary()
            .iter()
            .position(|t| t == eos)
            .expect("vocabulary contains EOS")
    }

    fn token_index(&self, token: &str) -> Result<usize> {
        self.vocabulary()
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }
}

/// `ln S0(caption | image)`: the sum of per-step log-probabilities.
/// The caption must end with EOS.
pub fn caption_logprob(backend: &dyn SpeakerBackend, image: &str, caption: &[String]) -> Result<f64> {
    check_caption(backend, caption)?;
    let mut total = 0.0;
    for (n, tok) in caption.iter().enumerate() {
        let idx = backend.token_index(tok)?;
        let step = backend.next_token_logprobs(image, &caption[..n])?;
        total += step.logp()[idx];
    }
    Ok(total)
}

pub(crate) fn check_caption(backend: &dyn SpeakerBackend, caption: &[String]) -> Result<()> {
    for tok in caption {
        backend.token_index(tok)?;
    }
    match caption.iter().position(|t| t == backend.eos()) {
        Some(i) if i + 1 == caption.len() => Ok(()),
        Some(_) => Err(Error::MalformedCaption("EOS before the end of the caption".into())),
        None => Err(Error::MalformedCaption("caption does not end with EOS".into())),
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Uniform distribution over a fixed vocabulary, whatever the input.
    pub struct UniformSpeaker {
        pub vocab: Support,
    }

    impl SpeakerBackend for UniformSpeaker {
        fn vocabulary(&self) -> &Support {
            &self.vocab
        }

        fn eos(&self) -> &str {
            self.vocab.last().unwrap()
        }

        fn next_token_logprobs(&self, _image: &str, _prefix: &[String]) -> Result<Dist> {
            Dist::uniform(self.vocab.clone())
        }
    }
}
