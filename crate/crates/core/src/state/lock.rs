use std::ops::{Deref, DerefMut};
use std::sync::{Condvar, Mutex, MutexGuard};

use super::StateError;

#[derive(Default)]
struct Tickets {
    next: u64,
    serving: u64,
}

/// Mutual exclusion with first-come first-served hand-off.
///
/// Each caller draws a ticket and waits until it is served, so waiters
/// acquire in arrival order. A panic while holding the guard poisons the
/// lock; later acquisitions report [`StateError::LockPoisoned`].
pub struct FifoLock<T> {
    tickets: Mutex<Tickets>,
    turn: Condvar,
    data: Mutex<T>,
}

impl<T> FifoLock<T> {
    pub fn new(value: T) -> Self {
        FifoLock {
            tickets: Mutex::new(Tickets::default()),
            turn: Condvar::new(),
            data: Mutex::new(value),
        }
    }

    pub fn lock(&self) -> Result<FifoGuard<'_, T>, StateError> {
        let mut tickets = self.tickets.lock().unwrap_or_else(|p| p.into_inner());
        let ticket = tickets.next;
        tickets.next += 1;
        while tickets.serving != ticket {
            tickets = self.turn.wait(tickets).unwrap_or_else(|p| p.into_inner());
        }
        drop(tickets);
        match self.data.lock() {
            Ok(data) => Ok(FifoGuard { lock: self, data: Some(data) }),
            Err(_) => {
                self.advance();
                Err(StateError::LockPoisoned)
            }
        }
    }

    fn advance(&self) {
        let mut tickets = self.tickets.lock().unwrap_or_else(|p| p.into_inner());
        tickets.serving += 1;
        drop(tickets);
        self.turn.notify_all();
    }

    pub fn is_poisoned(&self) -> bool {
        self.data.is_poisoned()
    }
}

pub struct FifoGuard<'a, T> {
    lock: &'a FifoLock<T>,
    data: Option<MutexGuard<'a, T>>,
}

impl<T> Deref for FifoGuard<'_, T> {
    type Target = T;
    fn deref(&self) -> &T {
        self.data.as_ref().expect("guard holds data until drop")
    }
}

impl<T> DerefMut for FifoGuard<'_, T> {
    fn deref_mut(&mut self) -> &mut T {
        self.data.as_mut().expect("guard holds data until drop")
    }
}

impl<T> Drop for FifoGuard<'_, T> {
    fn drop(&mut self) {
        // Release the data before handing the turn to the next ticket.
        self.data.take();
        self.lock.advance();
    }
}
