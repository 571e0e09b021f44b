//! Counting semaphore used to cap in-flight model requests and subprocesses.

use std::sync::{Condvar, Mutex};

#[derive(Debug)]
pub struct Semaphore {
    free: Mutex<usize>,
    released: Condvar,
}

pub struct Permit<'a> {
    owner: &'a Semaphore,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            free: Mutex::new(permits.max(1)),
            released: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore lock");
        while *free == 0 {
            free = self.released.wait(free).expect("semaphore lock");
        }
        *free -= 1;
        Permit { owner: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.owner.free.lock().expect("semaphore lock") += 1;
        self.owner.released.notify_one();
    }
}
