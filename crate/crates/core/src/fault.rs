//! Deliberate gradient corruption, used to show the gradient checks bite.

#[cfg(feature = "fault-injection")]
mod imp {
    use std::cell::Cell;

    thread_local! {
        static FLIP_CONV_BACKWARD: Cell<bool> = const { Cell::new(false) };
    }

    /// Flips the sign of every conv2d weight gradient computed on this thread
    /// while enabled.
    pub fn set_conv_backward_flip(enabled: bool) {
        FLIP_CONV_BACKWARD.with(|f| f.set(enabled));
    }

    pub(crate) fn conv_backward_flipped() -> bool {
        FLIP_CONV_BACKWARD.with(Cell::get)
    }
}

#[cfg(feature = "fault-injection")]
pub use imp::set_conv_backward_flip;
#[cfg(feature = "fault-injection")]
pub(crate) use imp::conv_backward_flipped;

#[cfg(not(feature = "fault-injection"))]
#[inline(always)]
pub(crate) fn conv_backward_flipped() -> bool {
    false
}
