//! Turning command-line backend flags into a provider.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, ValueEnum};
use relscore_core::imaging::ImageStore;
use relscore_core::metrics::{MetricConfig, ScoreMethod};
use relscore_core::model::SceneGraphDataset;
use relscore_core::providers::{
    BackendName, CachedProvider, HttpProvider, MockProvider, Provider, ProviderEndpoint, ScoreCache,
};

use crate::config::EndpointDefaults;
use crate::error::CliError;

pub const ENDPOINT_ENV: &str = "RELSCORE_ENDPOINT";
pub const TOKEN_ENV: &str = "RELSCORE_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MockMethod {
    Cosine,
    Sigmoid,
    Itm,
}

impl From<MockMethod> for ScoreMethod {
    fn from(m: MockMethod) -> Self {
        match m {
            MockMethod::Cosine => ScoreMethod::CosineClamped,
            MockMethod::Sigmoid => ScoreMethod::SigmoidProb,
            MockMethod::Itm => ScoreMethod::ItmProb,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    /// negclip, clip, siglip, blip2, vlm or mock.
    #[arg(long, default_value = "mock")]
    pub backend: String,
    /// Model-server base URL. RELSCORE_ENDPOINT takes precedence.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Scoring method of the mock backend.
    #[arg(long, value_enum, default_value = "cosine")]
    pub mock_method: MockMethod,
    /// Seed the mock with the groundtruth so it always prefers annotated
    /// triplets.
    #[arg(long)]
    pub mock_oracle: bool,
    /// Persistent score cache; created if missing.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

pub struct Backend {
    pub provider: Box<dyn Provider>,
    cache: Option<(Arc<ScoreCache>, PathBuf)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Scoring,
    Generation,
}

impl BackendArgs {
    fn name(&self) -> Result<BackendName, CliError> {
        self.backend.parse::<BackendName>().map_err(CliError::Input)
    }

    fn endpoint(&self, defaults: &EndpointDefaults, name: BackendName) -> Result<ProviderEndpoint, CliError> {
        let url = std::env::var(ENDPOINT_ENV)
            .ok()
            .filter(|v| !v.trim().is_empty())
            .or_else(|| self.endpoint.clone())
            .or_else(|| defaults.url.clone())
            .ok_or_else(|| CliError::input(format!("backend {name} needs --endpoint or {ENDPOINT_ENV}")))?;
        let mut ep = ProviderEndpoint::new(url, name);
        ep.timeout = Duration::from_secs(defaults.timeout_secs.max(1));
        ep.max_in_flight = defaults.max_in_flight;
        ep.retry_budget = defaults.retry_budget;
        ep.bearer_token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        Ok(ep)
    }

    /// Builds the provider. `groundtruth` is needed only for `--mock-oracle`.
    pub fn build(
        &self,
        purpose: Purpose,
        defaults: &EndpointDefaults,
        groundtruth: Option<(&SceneGraphDataset, &ImageStore, &MetricConfig)>,
    ) -> Result<Backend, CliError> {
        let name = self.name()?;
        let provider: Box<dyn Provider> = match (name, purpose) {
            (BackendName::Mock, Purpose::Generation) => Box::new(MockProvider::vlm()),
            (BackendName::Mock, Purpose::Scoring) => {
                let mock = MockProvider::new(self.mock_method.into());
                if self.mock_oracle {
                    let (ds, store, cfg) = groundtruth
                        .ok_or_else(|| CliError::input("--mock-oracle needs a groundtruth dataset"))?;
                    let n = mock.seed_from_groundtruth(ds, store, cfg)?;
                    log::info!("mock oracle seeded with {n} triplets");
                }
                Box::new(mock)
            }
            (BackendName::Vlm, Purpose::Scoring) => {
                return Err(CliError::input("the vlm backend generates relations and cannot score them"))
            }
            (BackendName::Vlm, Purpose::Generation) => Box::new(HttpProvider::new(self.endpoint(defaults, name)?)?),
            (_, Purpose::Generation) => {
                return Err(CliError::input(format!("backend {name} cannot generate relations; use vlm or mock")))
            }
            (_, Purpose::Scoring) => Box::new(HttpProvider::new(self.endpoint(defaults, name)?)?),
        };
        Ok(match &self.cache {
            None => Backend { provider, cache: None },
            Some(path) => {
                let cache = Arc::new(ScoreCache::load(path));
                log::info!("score cache {} holds {} entries", path.display(), cache.len());
                Backend {
                    provider: Box::new(CachedProvider::new(provider, cache.clone())),
                    cache: Some((cache, path.clone())),
                }
            }
        })
    }
}

impl Backend {
    /// Persists the cache, if any.
    pub fn finish(&self) -> Result<(), CliError> {
        if let Some((cache, path)) = &self.cache {
            log::info!("score cache: {} hits, {} misses", cache.hits(), cache.misses());
            cache
                .store(path)
                .map_err(|e| CliError::Internal(format!("cannot write cache {}: {e}", path.display())))?;
        }
        Ok(())
    }
}
