use super::{Environment, StepOutcome};
use crate::error::Result;
use crate::mdp::MdpSpec;
use crate::rng::RngStream;
use crate::units::FeatureTransform;

/// An environment whose observations pass through a [`FeatureTransform`].
/// Dynamics and reward are those of the wrapped environment.
#[derive(Debug, Clone)]
pub struct EngineeredEnv {
    inner: Box<dyn Environment>,
    transform: FeatureTransform,
    spec: MdpSpec,
    name: String,
}

impl EngineeredEnv {
    pub fn new(inner: Box<dyn Environment>, transform: FeatureTransform) -> Result<Self> {
        let base = inner.spec();
        let spec = MdpSpec {
            state_space: transform.transform_space(&base.state_space)?,
            ..base.clone()
        };
        let name = format!("engineered({})", inner.name());
        Ok(Self {
            inner,
            transform,
            spec,
            name,
        })
    }

    pub fn transform(&self) -> &FeatureTransform {
        &self.transform
    }

    pub fn inner(&self) -> &dyn Environment {
        self.inner.as_ref()
    }
}

impl Environment for EngineeredEnv {
    fn spec(&self) -> &MdpSpec {
        &self.spec
    }

    fn reset(&mut self) -> Vec<f64> {
        let s = self.inner.reset();
        self.transform.apply(&s)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let mut out = self.inner.step(action)?;
        out.next_state = self.transform.apply(&out.next_state);
        Ok(out)
    }

    fn reseed(&mut self, stream: &RngStream) {
        self.inner.reseed(stream);
    }

    fn box_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }

    fn name(&self) -> &str {
        &self.name
    }
}
