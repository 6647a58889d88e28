from setuptools import setup, find_packages
from codecs import open
from os import path

with open('requirements.txt') as f:
    requirements = f.readlines()

# Get README
this_directory = path.abspath(path.dirname(__file__))
with open(path.join(this_directory, 'README.md'), encoding='utf-8') as f:
    long_description = f.read()

# Get Release version
path_version = path.join(this_directory, 'microfed', 'version.txt')
with open(path_version) as f:
    version = f.read().strip()

extra_requirements = {
    'tests': [
        'pytest~=6.2',
        'pytest-cov',
        'pytest-console-scripts~=1.1',
        'coverage',
    ],
    'contrib': [
        'pre-commit>=2.10.1',
        'flake8',
    ]
}

extra_requirements['dev'] = [
    requirements,
    extra_requirements['tests'],
    extra_requirements['contrib'],
    ]

setup(
    name='microfed',
    version=version,
    description='Desk-scale federated segmentation of grain micrographs with style-model exchange.',
    long_description=long_description,
    long_description_content_type='text/markdown',
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'Programming Language :: Python :: 3',
    ],
    python_requires='>=3.8,<3.12',
    packages=find_packages(exclude=['docs', 'testing', 'testing.*']),
    include_package_data=True,
    package_data={'microfed': ['version.txt', 'config/*.json']},
    install_requires=requirements,
    extras_require=extra_requirements,
    entry_points={
        'console_scripts': [
            'microfed=microfed.main:run_main',
            'microfed_compare_runs=microfed.scripts.compare_runs:main',
            'microfed_training_curve=microfed.scripts.training_curve:main',
        ],
    },
)
