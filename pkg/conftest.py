# Copyright (C) 2024 The Software Heritage developers
# See the AUTHORS file at the top-level directory of this distribution
# License: GNU Affero General Public License version 3, or any later version
# See top-level LICENSE file for more information

from os import environ

import pytest
import torch

environ["LC_ALL"] = "C.UTF-8"


@pytest.fixture(autouse=True)
def single_thread_torch():
    """Pin torch to one thread so seeded runs are bitwise reproducible"""
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(threads)
