//! Switch between rayon and plain iterators depending on the `parallel` feature.

/// Expands to the first expression when the `parallel` feature is on and to
/// the second otherwise.
#[macro_export]
#[doc(hidden)]
macro_rules! if_rayon {
    ($par:expr, $seq:expr) => {{
        #[cfg(feature = "parallel")]
        {
            $par
        }
        #[cfg(not(feature = "parallel"))]
        {
            $seq
        }
    }};
}

#[cfg(feature = "parallel")]
pub(crate) use rayon::prelude::*;

/// Below this many independent work items the parallel paths stay sequential.
pub const MIN_PAR_LEN: usize = 8;
