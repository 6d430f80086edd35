use rand::Rng;

use crate::error::Result;
use crate::layers::{join, ConvLayers, ConvStack, Parameters};
use crate::ops::ConvParams;
use crate::ops::{concat, split, Activation};
use crate::tensor::Tensor;

/// Cross-stage-partial block: a processed branch and a shortcut branch,
/// each at half the output width, concatenated and merged by a 1×1 conv.
#[derive(Clone, Debug, PartialEq)]
pub struct CspLayer {
    pub main: ConvStack,
    pub shortcut: ConvStack,
    pub bottleneck: ConvStack,
    pub merge: ConvStack,
}

impl CspLayer {
    pub fn init(
        in_c: usize,
        out_c: usize,
        act: Activation,
        separable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = out_c / 2;
        Self {
            main: ConvStack::build(in_c, &[(hidden, 1, 1)], act, separable, rng),
            shortcut: ConvStack::build(in_c, &[(hidden, 1, 1)], act, separable, rng),
            bottleneck: ConvStack::build(
                hidden,
                &[(hidden, 1, 1), (hidden, 3, 1)],
                act,
                separable,
                rng,
            ),
            merge: ConvStack::build(2 * hidden, &[(out_c, 1, 1)], act, separable, rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.merge.out_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let m = self.bottleneck.forward(&self.main.forward(x)?)?;
        let s = self.shortcut.forward(x)?;
        self.merge.forward(&concat(&[&m, &s], 1)?)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut CspLayer) -> Result<Tensor> {
        let main = self.main.forward(x)?;
        let m = self.bottleneck.forward(&main)?;
        let s = self.shortcut.forward(x)?;
        let joined = concat(&[&m, &s], 1)?;
        let dj = self.merge.backward(&joined, dy, &mut grads.merge)?;
        let parts = split(&dj, 1, &[m.shape()[1], s.shape()[1]])?;
        let dmain = self
            .bottleneck
            .backward(&main, &parts[0], &mut grads.bottleneck)?;
        let mut dx = self.main.backward(x, &dmain, &mut grads.main)?;
        dx.accumulate(&self.shortcut.backward(x, &parts[1], &mut grads.shortcut)?)?;
        Ok(dx)
    }
}

impl ConvLayers for CspLayer {
    fn conv_layers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams)>) {
        self.main.conv_layers(&join(prefix, "main"), out);
        self.shortcut.conv_layers(&join(prefix, "shortcut"), out);
        self.bottleneck
            .conv_layers(&join(prefix, "bottleneck"), out);
        self.merge.conv_layers(&join(prefix, "merge"), out);
    }
}

impl Parameters for CspLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.main.visit(&join(prefix, "main"), f);
        self.shortcut.visit(&join(prefix, "shortcut"), f);
        self.bottleneck.visit(&join(prefix, "bottleneck"), f);
        self.merge.visit(&join(prefix, "merge"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.main.visit_mut(&join(prefix, "main"), f);
        self.shortcut.visit_mut(&join(prefix, "shortcut"), f);
        self.bottleneck.visit_mut(&join(prefix, "bottleneck"), f);
        self.merge.visit_mut(&join(prefix, "merge"), f);
    }
}
