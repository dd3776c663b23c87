import queue
import threading
import traceback

import psutil

from .powerlog import logger


def default_num_threads():
    # 物理コア数の半分、最低1
    cores = psutil.cpu_count(logical=False) or 1
    return max(1, cores // 2)


def run_jobs(func, jobs, num_threads=None):
    """Run ``func(job)`` for every job on daemon worker threads.

    Results come back in job order. If any job raised, the exception of the
    lowest-indexed failing job is re-raised after all workers finish.
    """
    jobs = list(jobs)
    if not jobs:
        return []
    num_threads = num_threads or default_num_threads()
    results = [None] * len(jobs)
    errors = [None] * len(jobs)

    # ジョブキューの作成
    job_queue = queue.Queue()
    for index, job in enumerate(jobs):
        job_queue.put((index, job))

    def worker():
        while True:
            try:
                index, job = job_queue.get_nowait()
            except queue.Empty:
                return
            try:
                results[index] = func(job)
            except Exception as e:
                errors[index] = e
                logger.debug('job %d failed: %s\n%s', index, e, traceback.format_exc())
            finally:
                job_queue.task_done()

    threads = []
    # スレッドの作成と開始
    for _ in range(min(num_threads, len(jobs))):
        t = threading.Thread(target=worker)
        t.daemon = True
        t.start()
        threads.append(t)

    # すべてのスレッドが終了するのを待つ
    for t in threads:
        t.join()

    for e in errors:
        if e is not None:
            raise e
    return results
