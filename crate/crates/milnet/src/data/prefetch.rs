//! Bounded single-producer prefetcher: batch assembly runs on a worker
//! thread while the training loop consumes, at most two batches in flight.

use std::sync::mpsc;
use std::thread;

pub const QUEUE_CAPACITY: usize = 2;

/// Iterator adaptor that produces items on a background thread through a
/// bounded channel, preserving order.
pub struct Prefetcher<T: Send + 'static> {
    rx: Option<mpsc::IntoIter<T>>,
    handle: Option<thread::JoinHandle<()>>,
}

impl<T: Send + 'static> Prefetcher<T> {
    pub fn spawn<I>(source: I) -> Self
    where
        I: IntoIterator<Item = T> + Send + 'static,
        I::IntoIter: Send,
    {
        let (tx, rx) = mpsc::sync_channel(QUEUE_CAPACITY);
        let handle = thread::spawn(move || {
            for item in source {
                if tx.send(item).is_err() {
                    break; // consumer dropped
                }
            }
        });
        Prefetcher {
            rx: Some(rx.into_iter()),
            handle: Some(handle),
        }
    }
}

impl<T: Send + 'static> Iterator for Prefetcher<T> {
    type Item = T;

    fn next(&mut self) -> Option<T> {
        self.rx.as_mut().and_then(|rx| rx.next())
    }
}

impl<T: Send + 'static> Drop for Prefetcher<T> {
    fn drop(&mut self) {
        // Unblock a producer stuck on a full channel before joining it.
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
