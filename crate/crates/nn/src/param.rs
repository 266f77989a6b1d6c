/// A named parameter or state buffer with its gradient and optimizer
/// velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub velocity: Vec<f32>,
    /// Updated by the optimizer (false for running statistics).
    pub trainable: bool,
    /// Subject to weight decay (conv weights only).
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>, decay: bool) -> Self {
        let n = value.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Self {
            name: name.into(),
            shape,
            value,
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
            trainable: true,
            decay,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        Self { trainable: false, ..Self::new(name, shape, value, false) }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything holding parameters, visited in a fixed order.
pub trait Module {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param));

    fn visit_ref(&self, f: &mut dyn FnMut(&Param));

    fn zero_grad(&mut self) {
        self.visit(&mut |p| p.zero_grad());
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_ref(&mut |p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }
}
